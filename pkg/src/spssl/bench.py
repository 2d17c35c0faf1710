"""Backend benchmark: `python -m spssl.bench`.

Times the four convolution kernels on the layer shapes the nets actually
use, for every available backend, then times full training steps per method.
The kernel pass runs in-process; the per-step pass re-invokes this module in
a child process per backend, because the tensor layer binds its kernel
module once at import.
"""

import argparse
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from . import backend

CONV_SHAPES = [  # (B, Ci, H, W, Co, k, stride, pad)
    (4, 1, 64, 64, 8, 3, 1, 1),
    (4, 8, 64, 64, 8, 3, 1, 1),
    (4, 8, 64, 64, 16, 3, 2, 1),
    (4, 16, 32, 32, 16, 3, 1, 1),
    (4, 16, 32, 32, 32, 3, 2, 1),
    (4, 32, 16, 16, 32, 3, 1, 1),
    (4, 64, 8, 8, 64, 3, 1, 1),
]
TCONV_SHAPES = [  # (B, Ci, H, W, Co, k, stride)
    (4, 16, 32, 32, 8, 2, 2),
    (4, 32, 16, 16, 16, 2, 2),
    (4, 64, 8, 8, 32, 2, 2),
]
STEP_METHODS = ("supervised_only", "mean_teacher", "ours_dae",
                "entropy_mc_baseline")


def _time(fn, reps):
    fn()
    t0 = time.time()
    for _ in range(reps):
        fn()
    return (time.time() - t0) / reps


def bench_kernels(reps=20):
    rng = np.random.default_rng(0)
    rows = []
    for name, mod in sorted(backend.available_backends().items()):
        conv_f = conv_b = 0.0
        for b, ci, h, w, co, k, s, p in CONV_SHAPES:
            x = rng.normal(size=(b, ci, h, w)).astype(np.float32)
            wt = rng.normal(size=(co, ci, k, k)).astype(np.float32)
            bias = np.zeros(co, np.float32)
            g = np.ones_like(mod.conv2d_forward(x, wt, bias, s, p))
            conv_f += _time(lambda: mod.conv2d_forward(x, wt, bias, s, p), reps)
            conv_b += _time(lambda: mod.conv2d_backward(g, x, wt, s, p), reps)
        tconv_f = tconv_b = 0.0
        for b, ci, h, w, co, k, s in TCONV_SHAPES:
            x = rng.normal(size=(b, ci, h, w)).astype(np.float32)
            wt = rng.normal(size=(ci, co, k, k)).astype(np.float32)
            bias = np.zeros(co, np.float32)
            g = np.ones_like(mod.tconv2d_forward(x, wt, bias, s))
            tconv_f += _time(lambda: mod.tconv2d_forward(x, wt, bias, s), reps)
            tconv_b += _time(lambda: mod.tconv2d_backward(g, x, wt, s), reps)
        rows.append((name, conv_f, conv_b, tconv_f, tconv_b))
    print("kernel totals over the net's layer shapes (ms)")
    print("%-10s %10s %10s %10s %10s"
          % ("backend", "conv fwd", "conv bwd", "tconv fwd", "tconv bwd"))
    for name, cf, cb, tf, tb in rows:
        print("%-10s %10.2f %10.2f %10.2f %10.2f"
              % (name, cf * 1e3, cb * 1e3, tf * 1e3, tb * 1e3))


def _bench_steps_here(reps):
    """Time ssl_step per method with whatever backend this process bound."""
    from . import checkpoint, data, nets, trainer
    from .rngs import named_rng

    with tempfile.TemporaryDirectory() as tmp:
        samples = data.gen_corpus(12, 96, 0)
        split = data.split_corpus(samples, data.SplitSpec(4, 4, 4, seed=0))
        data.save_corpus(os.path.join(tmp, "corpus"), samples, split)
        ckpt = os.path.join(tmp, "dae.ckpt")
        checkpoint.save_params(
            ckpt, nets.init_dae_params(nets.DaeConfig(), named_rng(0, "init_dae"))
        )
        base = trainer.RunConfig(
            t_max=10000, seeds=[0], dae_checkpoint=ckpt,
            data_dir=os.path.join(tmp, "corpus"), out_dir=tmp,
            split=dict(N_labeled=4, M_unlabeled=4, test_count=4, seed=0),
        )
        by_id = {s.id: s for s in samples}
        for method in STEP_METHODS:
            cfg = base.replaced(method=method)
            state = trainer.TrainState(cfg, 0)
            labeled = [by_id[i] for i in split["labeled"]]
            unl = [] if method == "supervised_only" \
                else [by_id[i] for i in split["unlabeled"]]
            batches = data.make_batches(labeled, unl, cfg.batch_size,
                                        state.rngs["batches"])
            for _ in range(2):
                trainer.ssl_step(state, next(batches), cfg)
            dt = _time(lambda: trainer.ssl_step(state, next(batches), cfg),
                       reps)
            print("STEP %s %s %.6f" % (backend.backend_name(), method, dt))


def bench_steps(reps):
    print()
    print("full training step (s/step, batch 4 at 64x64)")
    print("%-10s %-20s %10s" % ("backend", "method", "s/step"))
    for name in sorted(backend.available_backends()):
        env = dict(os.environ, SPSSL_BACKEND=name)
        out = subprocess.run(
            [sys.executable, "-m", "spssl.bench", "--step-child",
             "--reps", str(reps)],
            env=env, capture_output=True, text=True, check=True,
        )
        for line in out.stdout.splitlines():
            if line.startswith("STEP "):
                _, bname, method, secs = line.split()
                print("%-10s %-20s %10.3f" % (bname, method, float(secs)))


def main(argv=None):
    ap = argparse.ArgumentParser(prog="spssl.bench")
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--kernel-reps", type=int, default=20)
    ap.add_argument("--step-child", action="store_true",
                    help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.step_child:
        _bench_steps_here(args.reps)
        return 0
    print("backend in this process: %s" % backend.backend_name())
    bench_kernels(args.kernel_reps)
    bench_steps(args.reps)
    return 0


if __name__ == "__main__":
    sys.exit(main())
