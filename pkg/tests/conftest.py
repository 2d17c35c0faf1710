"""Shared fixtures: a small corpus on disk and a briefly trained denoiser.

Everything here is sized for speed; the acceptance tests build their own
full-size corpus and fully trained models.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from spssl import data, trainer


TINY = dict(count=14, side=96, seed=77)
TINY_SPLIT = dict(N_labeled=4, M_unlabeled=6, test_count=4, seed=77)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """(dir, samples_by_id, split) for a 14-sample corpus with a 4/6/4 split."""
    out = tmp_path_factory.mktemp("corpus")
    samples = data.gen_corpus(TINY["count"], TINY["side"], TINY["seed"])
    split = data.split_corpus(samples, data.SplitSpec(**TINY_SPLIT))
    data.save_corpus(str(out), samples, split)
    by_id = {s.id: s for s in samples}
    return str(out), by_id, split


def tiny_config(corpus_dir, **overrides):
    """A RunConfig scaled down for unit tests (32px crops, short horizons)."""
    base = dict(
        data_dir=corpus_dir,
        out_dir=os.path.join(corpus_dir, "..", "runs"),
        split=dict(TINY_SPLIT),
        crop=32,
        window=48,
        stride=24,
        t_max=4,
        dae_steps=8,
        seeds=[0],
        batch_size=4,
    )
    base.update(overrides)
    return trainer.RunConfig(**base)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines after the test summary, where
    output capture cannot swallow them."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dae(tmp_path_factory, tiny_corpus):
    """A briefly trained 32px DAE checkpoint (valid format, weak model)."""
    corpus_dir, by_id, split = tiny_corpus
    out = tmp_path_factory.mktemp("dae")
    cfg = tiny_config(corpus_dir, out_dir=str(out),
                      dae_checkpoint=str(out / "dae.ckpt"), dae_steps=12)
    params, ckpt = trainer.train_dae(cfg, by_id, split)
    return ckpt
