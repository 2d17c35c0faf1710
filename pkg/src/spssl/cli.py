"""Command-line front end.

Subcommands: gen-data, train-dae, train-ssl, eval, compare, sweep. Training
commands read a JSON config whose keys match RunConfig fields; flags override
file values, which override defaults. SPSSL_SEED provides a last-resort seed
when neither file nor flags set one. Every run writes its fully resolved
config next to its outputs. Errors print to stderr as `ErrorName: message`
and yield a nonzero exit code.
"""

import argparse
import json
import os
import sys

from . import data, eval as ev, trainer
from .errors import ConfigError, SpsslError


def _load_config_file(path):
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("%s is not valid JSON: %s" % (path, e))
    if not isinstance(doc, dict):
        raise ConfigError("%s must hold a JSON object" % path)
    return doc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_seeds(text):
    try:
        return [int(s) for s in str(text).split(",") if s != ""]
    except ValueError:
        raise ConfigError("bad seed list %r" % (text,))


def resolve_config(args):
    """defaults < config file < flags; SPSSL_SEED sits below both."""
    doc = {}
    if getattr(args, "config", None):
        doc = _load_config_file(args.config)
    flag_map = (
        ("method", "method"), ("gamma", "gamma"), ("beta", "beta"),
        ("t_max", "t_max"), ("data_dir", "data_dir"),
        ("out_dir", "out_dir"), ("run_id", "run_id"),
        ("dae_checkpoint", "dae_checkpoint"),
    )
    for attr, key in flag_map:
        v = getattr(args, attr, None)
        if v is not None:
            doc[key] = v
    if getattr(args, "seeds", None) is not None:
        doc["seeds"] = _parse_seeds(args.seeds)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError("--set expects key=value, got %r" % item)
        key, _, raw = item.partition("=")
        doc[key] = _parse_value(raw)
    if "seeds" not in doc and os.environ.get("SPSSL_SEED"):
        doc["seeds"] = _parse_seeds(os.environ["SPSSL_SEED"])
    return trainer.RunConfig.from_dict(doc)


def cmd_gen_data(args):
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise IOError(
            "%s exists and is not empty (use --force to overwrite)" % out
        )
    samples = data.gen_corpus(args.count, args.side, args.seed)
    spec = data.SplitSpec(args.labeled, args.unlabeled, args.test,
                          seed=args.seed)
    split = data.split_corpus(samples, spec)
    data.save_corpus(out, samples, split)
    print("wrote %d samples (%d/%d/%d split) to %s"
          % (len(samples), args.labeled, args.unlabeled, args.test, out))
    return 0


def cmd_train_dae(args):
    config = resolve_config(args)
    samples, split = data.load_corpus(config.data_dir)
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "dae_config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    _, ckpt = trainer.train_dae(config, samples, split)
    print("DAE checkpoint: %s" % ckpt)
    return 0


def cmd_train_ssl(args):
    config = resolve_config(args)
    dirs = trainer.run_training(config)
    for d in dirs:
        with open(os.path.join(d, "metrics.json")) as f:
            m = json.load(f)
        print("%s: dsc %.2f hd95 %.2f (inferences %d)"
              % (d, m["dsc_mean"], m["hd95_mean"], m["teacher_inferences"]))
    return 0


def cmd_eval(args):
    ckpt = args.checkpoint
    cfg_path = args.config or os.path.join(os.path.dirname(ckpt),
                                           "config.json")
    config = trainer.RunConfig.from_dict(_load_config_file(cfg_path))
    samples, split = data.load_corpus(config.data_dir)
    test = [samples[i] for i in split["test"]]
    rec = ev.evaluate_run(ckpt, test, config)
    for sid, d, h, flag in rec.rows:
        print("%s dsc=%.2f hd95=%s%s"
              % (sid, d, "n/a" if h is None else "%.2f" % h,
                 " [%s]" % flag if flag else ""))
    print("mean dsc %.2f  mean hd95 %.2f  (%d samples, %d flagged)"
          % (rec.dsc_mean(), rec.hd95_mean(), len(rec.rows),
             len(rec.flagged())))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ev.write_persample_csv(os.path.join(args.out, "persample.csv"), rec)
    return 0


def _collect_records(runs_dir):
    records = []
    for run_id in sorted(os.listdir(runs_dir)):
        run_dir = os.path.join(runs_dir, run_id)
        if not os.path.isdir(run_dir):
            continue
        for seed_name in sorted(os.listdir(run_dir)):
            seed_dir = os.path.join(run_dir, seed_name)
            if os.path.isfile(os.path.join(seed_dir, "metrics.json")):
                records.append(ev.load_record(seed_dir))
    return records


def cmd_compare(args):
    records = _collect_records(args.runs)
    if not records:
        raise IOError("no run metrics found under %s" % args.runs)
    table = ev.compare_runs(records)
    sys.stdout.write(table)
    with open(os.path.join(args.runs, "summary.csv"), "w") as f:
        f.write(table)
    return 0


def cmd_sweep(args):
    base = resolve_config(args)
    values = [_parse_value(v) for v in args.values.split(",")]
    if not values:
        raise ConfigError("--values is empty")
    records = []
    for v in values:
        if args.param == "method":
            child = base.replaced(method=v, run_id=str(v))
        else:
            label = "%s@%s=%s" % (base.run_id or base.method, args.param, v)
            child = base.replaced(**{args.param: v, "run_id": label})
        print("sweep: %s" % (child.run_id,))
        for d in trainer.run_training(child):
            records.append(ev.load_record(d))
    table = ev.compare_runs(records)
    sys.stdout.write(table)
    out_csv = os.path.join(base.out_dir, "sweep_%s_summary.csv" % args.param)
    with open(out_csv, "w") as f:
        f.write(table)
    print("summary: %s" % out_csv)
    return 0


def _add_config_flags(p, with_method=True):
    p.add_argument("--config", help="JSON config file")
    if with_method:
        p.add_argument("--method", choices=trainer.METHODS)
        p.add_argument("--gamma", type=float)
        p.add_argument("--beta", type=float)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--dae-checkpoint", dest="dae_checkpoint")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (JSON value syntax)")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="spssl",
        description="Uncertainty-weighted mean-teacher segmentation on a "
                    "synthetic 2D corpus.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--side", type=int, default=96)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labeled", type=int, default=8)
    g.add_argument("--unlabeled", type=int, default=72)
    g.add_argument("--test", type=int, default=20)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    d = sub.add_parser("train-dae", help="pre-train the mask denoiser")
    _add_config_flags(d, with_method=False)
    d.set_defaults(fn=cmd_train_dae)

    t = sub.add_parser("train-ssl", help="run mean-teacher training")
    _add_config_flags(t)
    t.set_defaults(fn=cmd_train_ssl)

    e = sub.add_parser("eval", help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to config.json beside the checkpoint")
    e.add_argument("--out", help="directory for persample.csv")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="summarize runs under a directory")
    c.add_argument("--runs", required=True)
    c.set_defaults(fn=cmd_compare)

    s = sub.add_parser("sweep", help="run a parameter sweep")
    _add_config_flags(s)
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True,
                   help="comma-separated values for --param")
    s.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (SpsslError, OSError) as e:
        sys.stderr.write("%s: %s\n" % (type(e).__name__, e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
