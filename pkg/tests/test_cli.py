"""End-to-end command-line checks, run in process through cli.main.

Heavy lifting is scaled down (tiny corpus, a handful of steps); the point
is wiring: flag precedence, file layout, exit codes, and stderr shape.
"""

import filecmp
import json
import os

import pytest

from spssl import cli, eval as ev, trainer
from conftest import TINY_SPLIT, tiny_config


def _write_config(path, cfg):
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f)
    return path


# ---------------------------------------------------------------- resolve

def _resolve(argv):
    args = cli.build_parser().parse_args(argv)
    return cli.resolve_config(args)


def test_defaults_then_file_then_flags(tmp_path, monkeypatch):
    monkeypatch.delenv("SPSSL_SEED", raising=False)
    cfg_path = _write_config(str(tmp_path / "c.json"),
                             trainer.RunConfig(t_max=7, gamma=3.0))
    got = _resolve(["train-ssl", "--config", cfg_path])
    assert got.t_max == 7 and got.gamma == 3.0
    assert got.beta == 0.1  # untouched default
    got = _resolve(["train-ssl", "--config", cfg_path, "--t-max", "9"])
    assert got.t_max == 9 and got.gamma == 3.0


def test_set_overrides_parse_json(tmp_path, monkeypatch):
    monkeypatch.delenv("SPSSL_SEED", raising=False)
    got = _resolve([
        "train-ssl", "--set", "t_max=11", "--set", "sigma_perturb=0.25",
        "--set", 'split={"N_labeled":4,"M_unlabeled":6,"test_count":4,"seed":1}',
        "--set", "run_id=probe",
    ])
    assert got.t_max == 11
    assert got.sigma_perturb == 0.25
    assert got.split.N_labeled == 4 and got.split.seed == 1
    assert got.run_id == "probe"


def test_seed_env_is_weakest(tmp_path, monkeypatch):
    monkeypatch.setenv("SPSSL_SEED", "5")
    assert _resolve(["train-ssl"]).seeds == [5]
    assert _resolve(["train-ssl", "--seeds", "1,2"]).seeds == [1, 2]
    cfg_path = _write_config(str(tmp_path / "c.json"),
                             trainer.RunConfig(seeds=[8, 9]))
    assert _resolve(["train-ssl", "--config", cfg_path]).seeds == [8, 9]
    monkeypatch.delenv("SPSSL_SEED")
    assert _resolve(["train-ssl"]).seeds == [0, 1, 2]


def test_resolve_rejects_garbage(monkeypatch):
    monkeypatch.delenv("SPSSL_SEED", raising=False)
    from spssl.errors import ConfigError
    with pytest.raises(ConfigError):
        _resolve(["train-ssl", "--seeds", "1,x"])
    with pytest.raises(ConfigError):
        _resolve(["train-ssl", "--set", "nonsense"])
    with pytest.raises(ConfigError):
        _resolve(["train-ssl", "--set", "no_such_key=1"])


# ---------------------------------------------------------------- gen-data

def test_gen_data_writes_and_refuses_overwrite(tmp_path, capsys):
    out = str(tmp_path / "corpus")
    argv = ["gen-data", "--out", out, "--count", "12", "--side", "64",
            "--labeled", "4", "--unlabeled", "4", "--test", "4"]
    assert cli.main(argv) == 0
    assert "12 samples" in capsys.readouterr().out
    assert os.path.isfile(os.path.join(out, "manifest.txt"))

    assert cli.main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("OSError:") and "--force" in err
    assert cli.main(argv + ["--force"]) == 0


def test_gen_data_is_byte_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert cli.main(["gen-data", "--out", out, "--count", "10",
                         "--side", "64", "--labeled", "3", "--unlabeled", "4",
                         "--test", "3", "--seed", "4"]) == 0
        outs.append(out)
    capsys.readouterr()
    names = sorted(os.listdir(outs[0]))
    assert names == sorted(os.listdir(outs[1]))
    match, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], names,
                                               shallow=False)
    assert mismatch == [] and errors == []


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def cli_run(tmp_path_factory, tiny_corpus):
    """One tiny supervised run driven through the CLI; reused below."""
    corpus_dir, _, _ = tiny_corpus
    out = str(tmp_path_factory.mktemp("cli_runs"))
    cfg = tiny_config(corpus_dir, method="supervised_only", out_dir=out,
                      t_max=3, run_id="tiny_sup")
    cfg_path = _write_config(os.path.join(out, "base.json"), cfg)
    rc = cli.main(["train-ssl", "--config", cfg_path])
    assert rc == 0
    seed_dir = os.path.join(out, "tiny_sup", "seed0")
    assert os.path.isdir(seed_dir)
    return out, seed_dir, cfg


def test_train_ssl_reports_and_writes(cli_run, capsys):
    out, seed_dir, _ = cli_run
    for name in ("config.json", "train_log.csv", "student.ckpt",
                 "teacher.ckpt", "persample.csv", "metrics.json"):
        assert os.path.isfile(os.path.join(seed_dir, name))


def test_train_dae_cli(tmp_path, tiny_corpus, capsys):
    corpus_dir, _, _ = tiny_corpus
    out = str(tmp_path / "dae_out")
    cfg = tiny_config(corpus_dir, out_dir=out, dae_steps=6)
    cfg_path = _write_config(str(tmp_path / "dae.json"), cfg)
    assert cli.main(["train-dae", "--config", cfg_path]) == 0
    text = capsys.readouterr().out
    assert "DAE checkpoint:" in text
    ckpt = text.split("DAE checkpoint:")[1].strip()
    assert os.path.isfile(ckpt)
    assert os.path.isfile(os.path.join(out, "dae_config.json"))


def test_eval_discovers_config_beside_checkpoint(cli_run, tmp_path, capsys):
    _, seed_dir, cfg = cli_run
    ckpt = os.path.join(seed_dir, "student.ckpt")
    out = str(tmp_path / "eval_out")
    assert cli.main(["eval", "--checkpoint", ckpt, "--out", out]) == 0
    text = capsys.readouterr().out
    assert "mean dsc" in text
    rows = ev.read_persample_csv(os.path.join(out, "persample.csv"))
    assert len(rows) == TINY_SPLIT["test_count"]
    baseline = ev.read_persample_csv(os.path.join(seed_dir, "persample.csv"))
    assert [r["dsc"] for r in rows] == [r["dsc"] for r in baseline]


def test_compare_cli(cli_run, capsys):
    out, _, _ = cli_run
    assert cli.main(["compare", "--runs", out]) == 0
    text = capsys.readouterr().out
    lines = text.strip().split("\n")
    assert lines[0] == ev.SUMMARY_HEADER
    assert any(line.startswith("tiny_sup,") for line in lines[1:])
    with open(os.path.join(out, "summary.csv")) as f:
        assert f.read() == text


def test_compare_empty_dir_fails(tmp_path, capsys):
    assert cli.main(["compare", "--runs", str(tmp_path)]) == 1
    assert capsys.readouterr().err.startswith("OSError:")


def test_sweep_cli_param_and_method(tmp_path, tiny_corpus, capsys):
    corpus_dir, _, _ = tiny_corpus
    out = str(tmp_path / "sweep_out")
    cfg = tiny_config(corpus_dir, method="mean_teacher", out_dir=out, t_max=2)
    cfg_path = _write_config(str(tmp_path / "s.json"), cfg)

    assert cli.main(["sweep", "--config", cfg_path, "--param", "gamma",
                     "--values", "0.5,2"]) == 0
    text = capsys.readouterr().out
    lines = [l for l in text.strip().split("\n") if "," in l and
             not l.startswith("sweep:") and not l.startswith("summary:")]
    assert lines[0] == ev.SUMMARY_HEADER
    ids = [l.split(",")[0] for l in lines[1:]]
    assert ids == ["mean_teacher@gamma=0.5", "mean_teacher@gamma=2"]
    csv_path = os.path.join(out, "sweep_gamma_summary.csv")
    assert os.path.isfile(csv_path)

    assert cli.main(["sweep", "--config", cfg_path, "--param", "method",
                     "--values", "supervised_only,mean_teacher"]) == 0
    text = capsys.readouterr().out
    rows = [l for l in text.strip().split("\n")
            if l.split(",")[0] in ("supervised_only", "mean_teacher")]
    assert len(rows) == 2
    assert os.path.isfile(os.path.join(out, "sweep_method_summary.csv"))


# ---------------------------------------------------------------- errors

def test_missing_config_file_fails_cleanly(capsys):
    assert cli.main(["train-ssl", "--config", "/no/such/file.json"]) == 1
    assert capsys.readouterr().err.startswith("FileNotFoundError:")


def test_invalid_json_config_fails_cleanly(tmp_path, capsys):
    bad = str(tmp_path / "bad.json")
    open(bad, "w").write("{not json")
    assert cli.main(["train-ssl", "--config", bad]) == 1
    assert capsys.readouterr().err.startswith("ConfigError:")


def test_dae_method_without_checkpoint_fails_cleanly(tiny_corpus, tmp_path,
                                                     capsys):
    corpus_dir, _, _ = tiny_corpus
    cfg = tiny_config(corpus_dir, method="ours_dae",
                      out_dir=str(tmp_path / "r"), t_max=2)
    cfg_path = _write_config(str(tmp_path / "c.json"), cfg)
    assert cli.main(["train-ssl", "--config", cfg_path]) == 1
    err = capsys.readouterr().err
    assert err.startswith("ConfigError:") and "train-dae" in err
