"""Corpus generation, persistence, splits, augmentation, perturbation,
corruption, and batching."""

import numpy as np
import pytest

from spssl import data
from spssl.errors import ConfigError
from spssl.rngs import named_rng


def test_gen_corpus_contract():
    samples = data.gen_corpus(6, 48, 3)
    assert len(samples) == 6
    assert [s.id for s in samples] == ["s%03d" % i for i in range(6)]
    for s in samples:
        assert s.image.shape == (1, 48, 48)
        assert s.image.dtype == np.float32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.mask.shape == (48, 48)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        frac = s.mask.mean()
        assert data.AREA_LO <= frac <= data.AREA_HI


def test_gen_corpus_deterministic():
    a = data.gen_corpus(4, 48, 11)
    b = data.gen_corpus(4, 48, 11)
    c = data.gen_corpus(4, 48, 12)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.mask, y.mask)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_gen_corpus_validation():
    with pytest.raises(ConfigError):
        data.gen_corpus(0, 48, 0)
    with pytest.raises(ConfigError):
        data.gen_corpus(1, 16, 0)


def test_foreground_brighter_on_average():
    for s in data.gen_corpus(3, 64, 17):
        fg = s.image[0][s.mask == 1].mean()
        bg = s.image[0][s.mask == 0].mean()
        assert fg > bg


def test_sample_validation():
    img = np.zeros((1, 8, 8), dtype=np.float32)
    with pytest.raises(ConfigError):
        data.SegSample("x", np.zeros((8, 8)))
    with pytest.raises(ConfigError):
        data.SegSample("x", img, np.zeros((4, 4)))
    with pytest.raises(ConfigError):
        data.SegSample("x", img, np.full((8, 8), 0.5))
    s = data.SegSample("x", img, None)
    assert s.mask is None


def test_split_spec_validation():
    with pytest.raises(ConfigError):
        data.SplitSpec(0, 5, 5)
    with pytest.raises(ConfigError):
        data.SplitSpec(4, -1, 5)
    spec = data.SplitSpec(4, 6, 4, seed=2)
    assert spec.total() == 14


def test_split_corpus_properties():
    samples = data.gen_corpus(12, 48, 5)
    spec = data.SplitSpec(3, 5, 4, seed=9)
    split = data.split_corpus(samples, spec)
    lab, unl, tst = split["labeled"], split["unlabeled"], split["test"]
    assert (len(lab), len(unl), len(tst)) == (3, 5, 4)
    assert lab == sorted(lab) and unl == sorted(unl) and tst == sorted(tst)
    all_ids = set(lab) | set(unl) | set(tst)
    assert len(all_ids) == 12
    # deterministic in the spec seed, different for another seed
    assert data.split_corpus(samples, data.SplitSpec(3, 5, 4, seed=9)) == split
    other = data.split_corpus(samples, data.SplitSpec(3, 5, 4, seed=10))
    assert other != split
    with pytest.raises(ConfigError):
        data.split_corpus(samples, data.SplitSpec(10, 10, 10))


def test_raster_round_trip(tmp_path):
    rng = named_rng(1, "raster")
    for shape in [(5,), (3, 4), (2, 3, 4), (1, 96, 96)]:
        arr = rng.random(shape, dtype=np.float32)
        path = str(tmp_path / "a.ras")
        data.save_raster(path, arr)
        back = data.load_raster(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_raster_rejects_bad_files(tmp_path):
    path = str(tmp_path / "a.ras")
    data.save_raster(path, np.zeros((3, 3), dtype=np.float32))
    blob = open(path, "rb").read()
    bad = str(tmp_path / "bad.ras")
    open(bad, "wb").write(b"XXXXXX" + blob[6:])
    with pytest.raises(IOError):
        data.load_raster(bad)
    short = str(tmp_path / "short.ras")
    open(short, "wb").write(blob[:-5])
    with pytest.raises(IOError):
        data.load_raster(short)


def test_corpus_round_trip(tmp_path):
    samples = data.gen_corpus(5, 48, 21)
    split = data.split_corpus(samples, data.SplitSpec(2, 2, 1, seed=21))
    out = str(tmp_path / "corpus")
    data.save_corpus(out, samples, split)
    by_id, split2 = data.load_corpus(out)
    assert split2 == split
    assert set(by_id) == {s.id for s in samples}
    for s in samples:
        assert np.array_equal(by_id[s.id].image, s.image)
        assert np.array_equal(by_id[s.id].mask, s.mask)


def test_load_corpus_requires_consistency(tmp_path):
    with pytest.raises(IOError):
        data.load_corpus(str(tmp_path / "missing"))
    samples = data.gen_corpus(3, 48, 2)
    split = data.split_corpus(samples, data.SplitSpec(1, 1, 1))
    out = str(tmp_path / "c")
    data.save_corpus(out, samples, split)
    # split that references an id missing from the manifest
    import json, os
    with open(os.path.join(out, "split.json"), "w") as f:
        json.dump({"labeled": ["zz"], "unlabeled": [], "test": []}, f)
    with pytest.raises(IOError):
        data.load_corpus(out)


def test_transform_matches_manual_composition():
    rng = named_rng(6, "tf")
    arr = rng.random((2, 10, 10))
    for _ in range(50):
        tf = data.draw_transform(rng, (10, 10), 6)
        got = data.apply_transform(arr, tf)
        ref = arr
        if tf["flip_h"]:
            ref = np.flip(ref, axis=-1)
        if tf["flip_v"]:
            ref = np.flip(ref, axis=-2)
        ref = np.rot90(ref, tf["k"], axes=(-2, -1))
        ref = ref[..., tf["y0"]:tf["y0"] + 6, tf["x0"]:tf["x0"] + 6]
        assert got.shape == (2, 6, 6)
        assert np.array_equal(got, ref)
        assert got.flags["C_CONTIGUOUS"]


def test_transform_crop_bounds():
    rng = named_rng(7, "tf2")
    for _ in range(100):
        tf = data.draw_transform(rng, (12, 12), 5)
        assert 0 <= tf["y0"] <= 7 and 0 <= tf["x0"] <= 7
        assert tf["k"] in (0, 1, 2, 3)
    with pytest.raises(ConfigError):
        data.draw_transform(rng, (12, 12), 13)


def test_augment_keeps_image_and_mask_aligned():
    samples = data.gen_corpus(2, 64, 8)
    rng = named_rng(8, "aug")
    for s in samples:
        for _ in range(10):
            out = data.augment(s, rng, crop=32)
            assert out.image.shape == (1, 32, 32)
            assert out.mask.shape == (32, 32)
            # foreground pixels carry the brighter appearance model, so the
            # crop's mean foreground intensity beats background when both
            # classes are present
            if 0 < out.mask.mean() < 1:
                fg = out.image[0][out.mask == 1].mean()
                bg = out.image[0][out.mask == 0].mean()
                assert fg > bg


def test_augment_without_mask():
    s = data.SegSample("u", np.zeros((1, 48, 48), dtype=np.float32), None)
    out = data.augment(s, named_rng(9, "aug"), crop=32)
    assert out.mask is None


def test_full_frame_transform_preserves_mask_area():
    s = data.gen_corpus(1, 48, 10)[0]
    rng = named_rng(10, "aug")
    for _ in range(20):
        tf = data.draw_transform(rng, (48, 48), 48)
        m = data.apply_transform(s.mask, tf)
        assert m.sum() == s.mask.sum()


def test_perturb_input():
    rng = named_rng(11, "pert")
    img = rng.random((2, 1, 16, 16), dtype=np.float32)
    same = data.perturb_input(img, 0.0, named_rng(0, "n"))
    assert np.array_equal(same, img)
    noisy = data.perturb_input(img, 0.1, named_rng(0, "n"))
    assert noisy.shape == img.shape and noisy.dtype == np.float32
    assert not np.array_equal(noisy, img)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0
    again = data.perturb_input(img, 0.1, named_rng(0, "n"))
    assert np.array_equal(noisy, again)
    with pytest.raises(ConfigError):
        data.perturb_input(img, -0.5, rng)


_OPS_VOCAB = {"boundary_swap", "erode", "dilate", "resize",
              "add_ellipse", "remove_component"}


def test_corrupt_mask_properties():
    samples = data.gen_corpus(4, 64, 13)
    for seed in range(12):
        rng = named_rng(seed, "corrupt")
        m = samples[seed % 4].mask
        out, ops = data.corrupt_mask(m, rng)
        assert out.shape == m.shape
        assert out.dtype == np.float32
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert len(ops) >= 1
        assert set(ops) <= _OPS_VOCAB


def test_corrupt_mask_deterministic():
    m = data.gen_corpus(1, 64, 14)[0].mask
    a, ops_a = data.corrupt_mask(m, named_rng(3, "c"))
    b, ops_b = data.corrupt_mask(m, named_rng(3, "c"))
    assert np.array_equal(a, b) and ops_a == ops_b


def test_corrupt_mask_empty_input():
    out, ops = data.corrupt_mask(np.zeros((16, 16), dtype=np.float32),
                                 named_rng(0, "c"))
    assert ops == ["empty_input"]
    assert not out.any()


def test_corrupt_mask_rejects_soft_values():
    with pytest.raises(ConfigError):
        data.corrupt_mask(np.full((8, 8), 0.5), named_rng(0, "c"))


def test_corrupt_mask_actually_changes_masks():
    # over many draws, corruption must modify the mask most of the time
    m = data.gen_corpus(1, 64, 15)[0].mask
    changed = sum(
        not np.array_equal(data.corrupt_mask(m, named_rng(s, "cc"))[0], m)
        for s in range(20)
    )
    assert changed >= 15


def test_jitter_mask_properties():
    base = None
    for seed in range(12):
        rng = named_rng(seed, "jit")
        base = data.gen_corpus(1, 64, seed)[0].mask
        out = data.jitter_mask(base, rng)
        assert out.shape == base.shape and out.dtype == np.float32
        assert set(np.unique(out)) <= {0.0, 1.0}
        assert out.any()
    a = data.jitter_mask(base, named_rng(3, "jit_det"))
    b = data.jitter_mask(base, named_rng(3, "jit_det"))
    assert np.array_equal(a, b)
    empty = np.zeros((32, 32), dtype=np.float32)
    out = data.jitter_mask(empty, named_rng(0, "jit_e"))
    assert not out.any() and out.shape == empty.shape


def test_make_batches_mixed_pools():
    labeled = [data.SegSample("l%d" % i, np.zeros((1, 8, 8), dtype=np.float32),
                              np.zeros((8, 8), dtype=np.float32))
               for i in range(3)]
    unlabeled = [data.SegSample("u%d" % i, np.zeros((1, 8, 8), dtype=np.float32))
                 for i in range(5)]
    gen = data.make_batches(labeled, unlabeled, 4, named_rng(0, "b"))
    lab_seen, unl_seen = [], []
    for _ in range(6):
        lab, unl = next(gen)
        assert len(lab) == 2 and len(unl) == 2
        assert all(s.mask is not None for s in lab)
        lab_seen += [s.id for s in lab]
        unl_seen += [s.id for s in unl]
    # every pass over a pool visits each sample once before reshuffling
    assert sorted(lab_seen[:3]) == ["l0", "l1", "l2"]
    assert sorted(unl_seen[:5]) == ["u0", "u1", "u2", "u3", "u4"]


def test_make_batches_labeled_only():
    labeled = [data.SegSample("l%d" % i, np.zeros((1, 8, 8), dtype=np.float32),
                              np.zeros((8, 8), dtype=np.float32))
               for i in range(2)]
    gen = data.make_batches(labeled, [], 4, named_rng(1, "b"))
    lab, unl = next(gen)
    assert len(lab) == 4 and unl == []


def test_make_batches_validation():
    lab = [data.SegSample("l", np.zeros((1, 8, 8), dtype=np.float32),
                          np.zeros((8, 8), dtype=np.float32))]
    with pytest.raises(ConfigError):
        next(data.make_batches([], lab, 4, named_rng(0, "b")))
    with pytest.raises(ConfigError):
        next(data.make_batches(lab, [], 3, named_rng(0, "b")))
