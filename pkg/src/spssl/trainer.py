"""Training orchestration: DAE pre-training, mean-teacher SSL, schedules,
EMA updates, checkpointing, and teacher-side inference accounting.

A step perturbs the batch independently for student and teacher, scores the
labeled half with the supervised loss, weights the consistency term by the
configured uncertainty scheme, then applies SGD with cosine-annealed lr and
an EMA teacher update. The counter `cumulative_teacher_side_inferences`
tracks every teacher-side forward pass so the single-inference property of
the DAE scheme is checkable arithmetic, not a claim.
"""

import json
import os

import numpy as np

from . import checkpoint, data, losses, nets
from . import tensor as T
from .errors import ConfigError, NumericError, RangeError, ShapeError
from .rngs import named_rng

METHODS = (
    "ours_dae",
    "ours_entropy_variant",
    "ours_threshold_variant",
    "mean_teacher",
    "entropy_mc_baseline",
    "supervised_only",
)

# methods whose uncertainty comes from the frozen DAE checkpoint
_DAE_METHODS = ("ours_dae", "ours_threshold_variant")

TRAIN_LOG_HEADER = "t,lr,lambda_c,loss_sup,loss_cons,mean_U,teacher_inferences"


class RunConfig:
    """Everything one training run needs; JSON keys match field names."""

    _DEFAULTS = dict(
        method="ours_dae",
        gamma=1.0,
        beta=0.1,
        alpha_ema=0.99,
        lr0=0.1,
        momentum=0.9,
        t_max=2000,
        K=8,
        batch_size=4,
        sigma_perturb=0.1,
        seeds=(0, 1, 2),
        dae_checkpoint=None,
        data_dir="corpus",
        out_dir="runs",
        run_id=None,
        crop=64,
        window=64,
        stride=32,
        dae_steps=2000,
        dae_lr0=0.1,
        dae_lr_every=500,
        dae_on_all_masks=False,
        dae_binarize_input=False,
        log_every=1,
    )

    def __init__(self, **kw):
        split = kw.pop("split", None)
        unknown = set(kw) - set(self._DEFAULTS)
        if unknown:
            raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
        for k, v in self._DEFAULTS.items():
            setattr(self, k, kw.get(k, v))
        if split is None:
            split = data.SplitSpec(8, 72, 20, seed=0)
        elif isinstance(split, dict):
            try:
                split = data.SplitSpec(**split)
            except TypeError as e:
                raise ConfigError("bad split spec: %s" % e)
        self.split = split
        self.seeds = [int(s) for s in self.seeds]
        self._validate()

    def _validate(self):
        if self.method not in METHODS:
            raise ConfigError(
                "unknown method %r (choose from %s)"
                % (self.method, "|".join(METHODS))
            )
        if not 0.0 <= self.alpha_ema < 1.0:
            raise ConfigError("alpha_ema must be in [0,1)")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")
        if self.t_max < 1:
            raise ConfigError("t_max must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even and >= 2")
        if self.sigma_perturb < 0:
            raise ConfigError("sigma_perturb must be >= 0")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d))

    def to_dict(self):
        out = {k: getattr(self, k) for k in self._DEFAULTS}
        out["seeds"] = list(self.seeds)
        out["split"] = dict(
            N_labeled=self.split.N_labeled,
            M_unlabeled=self.split.M_unlabeled,
            test_count=self.split.test_count,
            seed=self.split.seed,
        )
        return out

    def replaced(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# schedules

def lambda_c(t, t_max, beta):
    """Gaussian warm-up: beta * exp(-5 (1 - t/t_max)^2)."""
    if t < 0 or t > t_max:
        raise RangeError("t=%r outside [0, %r]" % (t, t_max))
    return beta * float(np.exp(-5.0 * (1.0 - t / t_max) ** 2))

def cosine_lr(t, t_max, lr0):
    if t < 0 or t > t_max:
        raise RangeError("t=%r outside [0, %r]" % (t, t_max))
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * t / t_max)))

def dae_lr(step, lr0, every=500):
    """Halve lr0 every `every` steps (staircase)."""
    if step < 0:
        raise RangeError("step must be >= 0")
    return lr0 / 2.0 ** (step // every)


def ema_update(teacher, student, alpha):
    """In-place theta_t <- alpha * theta_t + (1 - alpha) * theta_s."""
    t_names = teacher.names()
    s_names = student.names()
    if t_names != s_names:
        raise ShapeError("teacher/student parameter lists differ")
    for name in t_names:
        tv, sv = teacher[name], student[name]
        if tv.data.shape != sv.data.shape:
            raise ShapeError(
                "shape mismatch at %s: %r vs %r"
                % (name, tv.data.shape, sv.data.shape)
            )
        tv.data *= alpha
        tv.data += (1.0 - alpha) * sv.data
    return teacher


# ---------------------------------------------------------------------------
# DAE pre-training

def _dae_mask_pool(samples, split, on_all_masks):
    ids = list(split["labeled"])
    if on_all_masks:
        ids += list(split["unlabeled"])
    return [samples[i] for i in ids]

def train_dae(config, samples, split, seed=None):
    """Train the mask denoiser on corrupted/clean crop pairs.

    Returns (params, rows) and persists a checkpoint plus a step,lr,loss
    curve under out_dir. Fully deterministic for a given seed.
    """
    if seed is None:
        seed = config.seeds[0]
    pool = _dae_mask_pool(samples, split, config.dae_on_all_masks)
    if not pool:
        raise ConfigError("no masks available for DAE training")
    for s in pool:
        if s.mask is None:
            raise ConfigError("DAE training needs masks on every sample")

    dcfg = nets.DaeConfig(side=config.crop)
    params = nets.init_dae_params(dcfg, named_rng(seed, "init_dae"))
    rng = named_rng(seed, "dae_data")
    rows = []
    for step in range(config.dae_steps):
        xs, ys = [], []
        for _ in range(config.batch_size):
            s = pool[int(rng.integers(0, len(pool)))]
            # scale/translation jitter widens the handful of clean shapes
            # the denoiser sees; the jittered mask is the target
            clean = data.jitter_mask(s.mask, rng)
            corrupted, _ops = data.corrupt_mask(clean, rng)
            tf = data.draw_transform(rng, clean.shape, config.crop)
            xs.append(data.apply_transform(corrupted, tf))
            ys.append(data.apply_transform(clean, tf))
        x = np.stack(xs)[:, None].astype(np.float32)
        y = np.stack(ys)[:, None].astype(np.float32)
        T.zero_grad(params)
        recon = nets.dae_forward(params, T.constant(x))
        loss = losses.dae_recon_loss(recon, y)
        T.backward(loss)
        lr = dae_lr(step, config.dae_lr0, config.dae_lr_every)
        T.sgd_step(params, lr, config.momentum)
        rows.append((step, lr, float(loss.data[0])))

    os.makedirs(config.out_dir, exist_ok=True)
    ckpt = config.dae_checkpoint or os.path.join(config.out_dir, "dae.ckpt")
    checkpoint.save_params(ckpt, params)
    curve = os.path.splitext(ckpt)[0] + "_curve.csv"
    with open(curve, "w") as f:
        f.write("step,lr,loss\n")
        for step, lr, lv in rows:
            f.write("%d,%s,%s\n" % (step, repr(lr), repr(lv)))
    return params, ckpt


# ---------------------------------------------------------------------------
# SSL training

class TrainState:
    """Mutable per-seed training state."""

    def __init__(self, config, seed):
        self.t = 0
        self.seed = seed
        self.student = nets.init_seg_params(
            nets.SegNetConfig(), named_rng(seed, "init_student")
        )
        # teacher starts as an exact copy and never sees a gradient
        self.teacher = self.student.copy(requires_grad=False)
        self.cumulative_teacher_side_inferences = 0
        self.rngs = {
            name: named_rng(seed, name)
            for name in ("batches", "augment", "perturb_student",
                         "perturb_teacher", "dropout_student", "mc")
        }
        self.dae = None
        if config.method in _DAE_METHODS:
            if not config.dae_checkpoint:
                raise ConfigError(
                    "method %s needs dae_checkpoint; train one with "
                    "`spssl train-dae` and point dae_checkpoint at it"
                    % config.method
                )
            dcfg = nets.DaeConfig(side=config.crop)
            self.dae = checkpoint.load_params(
                config.dae_checkpoint, dcfg.architecture_id
            )


def _batch_arrays(config, lab, unl, rng_aug):
    lab_a = [data.augment(s, rng_aug, config.crop) for s in lab]
    unl_a = [data.augment(s, rng_aug, config.crop) for s in unl]
    images = np.concatenate(
        [s.image[None] for s in lab_a + unl_a], axis=0
    )
    labels = np.stack([s.mask for s in lab_a])
    return images, labels, len(lab_a)


def _uncertainty_and_weights(state, config, p_t, teacher_input):
    """Dispatch on config.method; returns (U, weights, extra_inferences)."""
    method = config.method
    b, _, h, w = p_t.shape
    if method == "mean_teacher":
        return None, losses.uniform_weights((b, h, w)), 0
    if method in _DAE_METHODS:
        u = losses.dae_uncertainty(p_t[:, 1:2], state.dae)
    else:
        u = losses.entropy_uncertainty(
            state.teacher, teacher_input, config.K, state.rngs["mc"]
        )
    if method == "ours_dae":
        wts = losses.reliability_weights(u, config.gamma)
    elif method == "ours_entropy_variant":
        wts = losses.reliability_weights(u, config.gamma)
    elif method == "ours_threshold_variant":
        wts = losses.threshold_weights(u, state.t, config.t_max, 1.0)
    else:  # entropy_mc_baseline
        wts = losses.threshold_weights(
            u, state.t, config.t_max, float(np.log(2.0))
        )
    return u, wts, u.inference_count


def ssl_step(state, batch, config):
    """One training iteration; returns a log record dict."""
    lab, unl = batch
    images, labels, n_lab = _batch_arrays(
        config, lab, unl, state.rngs["augment"]
    )
    t = state.t
    lr = cosine_lr(t, config.t_max, config.lr0)
    lam = lambda_c(t, config.t_max, config.beta)

    student_in = data.perturb_input(
        images, config.sigma_perturb, state.rngs["perturb_student"]
    )
    T.zero_grad(state.student)
    logits_s = nets.seg_forward(
        state.student, T.constant(student_in), mode="train",
        rng=state.rngs["dropout_student"]
    )
    sup = losses.supervised_loss(
        T.narrow(logits_s, 0, 0, n_lab), labels
    )

    cons_val = 0.0
    mean_u = 0.0
    extra = 0
    if config.method == "supervised_only":
        total = sup
    else:
        teacher_in = data.perturb_input(
            images, config.sigma_perturb, state.rngs["perturb_teacher"]
        )
        with T.no_grad():
            logits_t = nets.seg_forward(
                state.teacher, T.constant(teacher_in), mode="eval"
            )
            p_t = T.softmax_channel(logits_t).data
        u, wts, extra = _uncertainty_and_weights(
            state, config, p_t, teacher_in
        )
        p_s = T.softmax_channel(logits_s)
        cons = losses.consistency_loss(p_s, p_t, wts)
        total = T.add(sup, T.scalar_mul(cons, lam))
        cons_val = float(cons.data[0])
        mean_u = 0.0 if u is None else float(u.values.mean())
        state.cumulative_teacher_side_inferences += extra + 1

    loss_val = float(total.data[0])
    sup_val = float(sup.data[0])
    if not np.isfinite(loss_val):
        raise NumericError(
            "non-finite loss at t=%d (sup=%r cons=%r)"
            % (t, sup_val, cons_val)
        )
    T.backward(total)
    T.sgd_step(state.student, lr, config.momentum)
    ema_update(state.teacher, state.student, config.alpha_ema)
    state.t = t + 1
    return {
        "t": t,
        "lr": lr,
        "lambda_c": lam,
        "loss_sup": sup_val,
        "loss_cons": cons_val,
        "mean_U": mean_u,
        "teacher_inferences": state.cumulative_teacher_side_inferences,
    }


def _dump_diagnostics(path, state, err):
    info = {
        "t": state.t,
        "seed": state.seed,
        "error": str(err),
        "param_extrema": {
            name: [float(e.data.min()), float(e.data.max())]
            for name, e in state.student.items()
        },
    }
    with open(path, "w") as f:
        json.dump(info, f, indent=1)
        f.write("\n")


def run_seed(config, samples, split, seed):
    """Train one seed end to end; returns the seed output directory."""
    from . import eval as ev  # local import: eval also consumes nets

    run_id = config.run_id or config.method
    out = os.path.join(config.out_dir, run_id, "seed%d" % seed)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")

    state = TrainState(config, seed)
    labeled = [samples[i] for i in split["labeled"]]
    if config.method == "supervised_only":
        unlabeled = []
    else:
        unlabeled = [s.copy() for s in (samples[i] for i in split["unlabeled"])]
        for s in unlabeled:
            s.mask = None
    batches = data.make_batches(
        labeled, unlabeled, config.batch_size, state.rngs["batches"]
    )

    log_path = os.path.join(out, "train_log.csv")
    with open(log_path, "w") as f:
        f.write(TRAIN_LOG_HEADER + "\n")
        for _ in range(config.t_max):
            try:
                rec = ssl_step(state, next(batches), config)
            except NumericError as e:
                _dump_diagnostics(os.path.join(out, "diagnostics.json"),
                                  state, e)
                raise
            if rec["t"] % config.log_every == 0 or rec["t"] == config.t_max - 1:
                f.write("%d,%s,%s,%s,%s,%s,%d\n" % (
                    rec["t"], repr(rec["lr"]), repr(rec["lambda_c"]),
                    repr(rec["loss_sup"]), repr(rec["loss_cons"]),
                    repr(rec["mean_U"]), rec["teacher_inferences"],
                ))

    checkpoint.save_params(os.path.join(out, "student.ckpt"), state.student)
    checkpoint.save_params(os.path.join(out, "teacher.ckpt"), state.teacher)

    test = [samples[i] for i in split["test"]]
    record = ev.evaluate_run(
        os.path.join(out, "student.ckpt"), test, config, seed=seed,
        run_id=run_id,
    )
    record.teacher_inferences = state.cumulative_teacher_side_inferences
    record.t_max = config.t_max
    ev.write_persample_csv(os.path.join(out, "persample.csv"), record)
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(record.summary_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    return out


def run_training(config):
    """Run every seed in the config; returns the list of seed directories."""
    samples, split = data.load_corpus(config.data_dir)
    _check_split_sizes(config, split)
    return [run_seed(config, samples, split, s) for s in config.seeds]


def _check_split_sizes(config, split):
    n, m = len(split["labeled"]), len(split["unlabeled"])
    if (n, m) != (config.split.N_labeled, config.split.M_unlabeled):
        raise ConfigError(
            "corpus split %d/%d does not match config %d/%d"
            % (n, m, config.split.N_labeled, config.split.M_unlabeled)
        )
