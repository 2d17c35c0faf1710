"""Synthetic 2D segmentation corpus: generation, persistence, splits,
augmentation, perturbation, and mask corruption.

The corpus stands in for a volumetric dataset at desk scale: 100 samples at
96x96, binary foreground blobs built from overlapping ellipses, trained on
random 64x64 crops.
"""

import json
import os

import numpy as np
from scipy import ndimage

from .errors import ConfigError

RASTER_MAGIC = b"SPRAS1"

# Appearance model. Every sample draws its own foreground/background levels
# from FG_RANGE/BG_RANGE, so class contrast varies across the corpus while
# the texture amplitude and pixel noise stay fixed: low-contrast draws are
# genuinely ambiguous. A handful of labeled samples cannot cover the
# appearance range, which is what makes the unlabeled pool informative; the
# range widths and NOISE_SIGMA are the difficulty knobs.
FG_RANGE = (0.55, 0.80)
BG_RANGE = (0.25, 0.45)
TEXTURE_AMP = 0.10
NOISE_SIGMA = 0.14

AREA_LO = 0.05
AREA_HI = 0.30


class SegSample:
    """One image/mask pair. `image` is float32 [1,H,W] in [0,1]; `mask` is
    float32 [H,W] with values in {0,1}, or None for unlabeled use."""

    __slots__ = ("id", "image", "mask")

    def __init__(self, id, image, mask=None):
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3 or image.shape[0] != 1:
            raise ConfigError("image must be [1,H,W], got %r" % (image.shape,))
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float32)
            if mask.shape != image.shape[1:]:
                raise ConfigError(
                    "mask shape %r does not match image %r"
                    % (mask.shape, image.shape)
                )
            bad = np.setdiff1d(np.unique(mask), [0.0, 1.0])
            if bad.size:
                raise ConfigError("mask values must be 0/1, found %r" % (bad,))
        self.id = id
        self.image = image
        self.mask = mask

    def copy(self):
        m = None if self.mask is None else self.mask.copy()
        return SegSample(self.id, self.image.copy(), m)


class SplitSpec:
    def __init__(self, N_labeled, M_unlabeled, test_count, seed=0):
        for name, v in (("N_labeled", N_labeled), ("M_unlabeled", M_unlabeled),
                        ("test_count", test_count)):
            if int(v) != v or v < 0:
                raise ConfigError("%s must be a non-negative int" % name)
        if N_labeled < 1:
            raise ConfigError("need at least one labeled sample")
        self.N_labeled = int(N_labeled)
        self.M_unlabeled = int(M_unlabeled)
        self.test_count = int(test_count)
        self.seed = int(seed)

    def total(self):
        return self.N_labeled + self.M_unlabeled + self.test_count


# ---------------------------------------------------------------------------
# generation

def _texture_field(rng, side, amp):
    # smooth field: coarse iid grid blown up bilinearly
    coarse = rng.normal(size=(7, 7))
    field = ndimage.zoom(coarse, side / 7.0, order=1, grid_mode=True,
                         mode="nearest")
    field = field[:side, :side]
    return (amp * field).astype(np.float64)

def _ellipse_mask(side, cy, cx, a, b, theta, yy, xx):
    ct, st = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0

def _draw_blob(rng, side, yy, xx):
    mask = np.zeros((side, side), dtype=bool)
    for _ in range(rng.integers(2, 5)):
        cy = rng.uniform(0.28, 0.72) * side
        cx = rng.uniform(0.28, 0.72) * side
        a = rng.uniform(0.08, 0.24) * side
        b = rng.uniform(0.08, 0.24) * side
        theta = rng.uniform(0.0, np.pi)
        mask |= _ellipse_mask(side, cy, cx, a, b, theta, yy, xx)
    return mask

def gen_corpus(count, side, seed, texture_amp=TEXTURE_AMP,
               noise_sigma=NOISE_SIGMA):
    """Generate `count` samples at side x side, fully determined by `seed`.

    Foreground is a blob of 2..4 overlapping rotated ellipses whose area
    fraction lands in [0.05, 0.30] (redrawn otherwise). Each sample draws its
    own class levels fg ~ U(FG_RANGE) and bg ~ U(BG_RANGE); intensity is
    fg + t inside and bg - t outside, where t is a smooth texture field, plus
    clipped Gaussian pixel noise.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if side < 32:
        raise ConfigError("side must be >= 32")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    samples = []
    for i in range(count):
        while True:
            mask = _draw_blob(rng, side, yy, xx)
            frac = mask.mean()
            if AREA_LO <= frac <= AREA_HI:
                break
        fg = rng.uniform(*FG_RANGE)
        bg = rng.uniform(*BG_RANGE)
        tex = _texture_field(rng, side, texture_amp)
        # center the texture term within each class region so the drawn
        # levels are the exact region means; the fg-brighter-than-bg
        # invariant then holds by construction even for low-contrast draws
        tex_in = tex - tex[mask].mean()
        tex_out = tex - tex[~mask].mean()
        img = np.where(mask, fg + tex_in, bg - tex_out)
        img = img + noise_sigma * rng.normal(size=(side, side))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(SegSample("s%03d" % i, img[None],
                                 mask.astype(np.float32)))
    return samples


def split_corpus(samples, spec):
    """Assign disjoint labeled/unlabeled/test id sets, shuffled by spec.seed."""
    if spec.total() > len(samples):
        raise ConfigError(
            "split needs %d samples, corpus has %d"
            % (spec.total(), len(samples))
        )
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5917]))
    order = rng.permutation(len(samples))
    ids = [samples[j].id for j in order]
    n, m, t = spec.N_labeled, spec.M_unlabeled, spec.test_count
    return {
        "labeled": sorted(ids[:n]),
        "unlabeled": sorted(ids[n:n + m]),
        "test": sorted(ids[n + m:n + m + t]),
    }


# ---------------------------------------------------------------------------
# raster persistence

def save_raster(path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC)
        f.write(np.uint32(arr.ndim).astype("<u4").tobytes())
        f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        f.write(arr.tobytes())

def load_raster(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(RASTER_MAGIC)] != RASTER_MAGIC:
        raise IOError("%s: bad raster magic" % path)
    off = len(RASTER_MAGIC)
    if len(blob) < off + 4:
        raise IOError("%s: truncated raster header" % path)
    rank = int(np.frombuffer(blob, "<u4", 1, off)[0])
    off += 4
    if len(blob) < off + 4 * rank:
        raise IOError("%s: truncated raster dims" % path)
    dims = np.frombuffer(blob, "<u4", rank, off)
    off += 4 * rank
    n = int(np.prod(dims))
    if len(blob) != off + 4 * n:
        raise IOError("%s: size mismatch" % path)
    data = np.frombuffer(blob, "<f4", n, off)
    return data.reshape(dims).copy()


def save_corpus(out_dir, samples, split):
    os.makedirs(out_dir, exist_ok=True)
    for s in samples:
        save_raster(os.path.join(out_dir, s.id + ".img"), s.image)
        if s.mask is None:
            raise ConfigError("corpus samples must carry masks on disk")
        save_raster(os.path.join(out_dir, s.id + ".msk"), s.mask)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for s in samples:
            f.write(s.id + "\n")
    with open(os.path.join(out_dir, "split.json"), "w") as f:
        json.dump(split, f, indent=1, sort_keys=True)
        f.write("\n")

def load_corpus(dir_path):
    """Read a corpus directory back; returns (samples_by_id, split)."""
    man = os.path.join(dir_path, "manifest.txt")
    if not os.path.isfile(man):
        raise IOError("no manifest.txt under %s" % dir_path)
    with open(man) as f:
        ids = [ln.strip() for ln in f if ln.strip()]
    samples = {}
    for sid in ids:
        img = load_raster(os.path.join(dir_path, sid + ".img"))
        msk = load_raster(os.path.join(dir_path, sid + ".msk"))
        samples[sid] = SegSample(sid, img, msk)
    with open(os.path.join(dir_path, "split.json")) as f:
        split = json.load(f)
    for key in ("labeled", "unlabeled", "test"):
        if key not in split:
            raise IOError("split.json missing key %r" % key)
        for sid in split[key]:
            if sid not in samples:
                raise IOError("split id %r not in manifest" % sid)
    return samples, split


# ---------------------------------------------------------------------------
# augmentation

def draw_transform(rng, shape, crop):
    """Sample one spatial transform: flips, k*90 rotation, crop corner.

    Drawing is separate from application so the same transform can be applied
    to an image, its mask, and any other aligned plane.
    """
    h, w = shape
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4))
    # frame is square both before and after rotation for square inputs; for
    # odd k the roles of h and w swap
    rh, rw = (w, h) if k % 2 else (h, w)
    if crop > rh or crop > rw:
        raise ConfigError("crop %d does not fit in %dx%d" % (crop, rh, rw))
    y0 = int(rng.integers(0, rh - crop + 1))
    x0 = int(rng.integers(0, rw - crop + 1))
    return {"flip_h": flip_h, "flip_v": flip_v, "k": k,
            "y0": y0, "x0": x0, "crop": crop}

def apply_transform(arr, tf):
    """Apply a drawn transform to [H,W] or [C,H,W]."""
    a = arr
    if tf["flip_h"]:
        a = np.flip(a, axis=-1)
    if tf["flip_v"]:
        a = np.flip(a, axis=-2)
    if tf["k"]:
        a = np.rot90(a, tf["k"], axes=(-2, -1))
    c, y0, x0 = tf["crop"], tf["y0"], tf["x0"]
    return np.ascontiguousarray(a[..., y0:y0 + c, x0:x0 + c])

def augment(sample, rng, crop=64):
    tf = draw_transform(rng, sample.image.shape[1:], crop)
    img = apply_transform(sample.image, tf)
    msk = None if sample.mask is None else apply_transform(sample.mask, tf)
    return SegSample(sample.id, img, msk)


def perturb_input(image, sigma, rng):
    """Additive i.i.d. Gaussian noise, clipped back to [0,1]."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    noise = rng.normal(size=image.shape)
    out = image + sigma * noise
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# mask corruption

_CROSS = ndimage.generate_binary_structure(2, 1)

def _boundary_swap(mask, rng, p=0.3, dist=2.0):
    if not mask.any() or mask.all():
        return mask
    d_in = ndimage.distance_transform_edt(mask)
    d_out = ndimage.distance_transform_edt(~mask)
    band = np.where(mask, d_in, d_out) <= dist
    flip = band & (rng.random(mask.shape) < p)
    return mask ^ flip

def _morph(mask, rng):
    iters = int(rng.integers(1, 3))
    if rng.random() < 0.5:
        out = ndimage.binary_erosion(mask, _CROSS, iterations=iters)
        name = "erode"
    else:
        out = ndimage.binary_dilation(mask, _CROSS, iterations=iters)
        name = "dilate"
    return out, name

def _resize_about_centroid(mask, rng):
    if not mask.any():
        return mask
    scale = rng.uniform(0.8, 1.2)
    cy, cx = ndimage.center_of_mass(mask)
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # pull back output coords to input coords, nearest neighbor
    sy = np.rint(cy + (yy - cy) / scale).astype(np.int64)
    sx = np.rint(cx + (xx - cx) / scale).astype(np.int64)
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(mask)
    out[ok] = mask[sy[ok], sx[ok]]
    return out

def _shift(mask, dy, dx):
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = mask[src_y, src_x]
    return out

def jitter_mask(mask, rng, max_shift=8):
    """Similarity jitter for mask-space augmentation: rescale about the
    centroid, then translate by up to max_shift pixels (zero fill). Used to
    widen the shape diversity the denoiser trains on; an empty mask passes
    through unchanged."""
    m = np.asarray(mask).astype(bool)
    if m.any():
        m = _resize_about_centroid(m, rng)
        dy = int(rng.integers(-max_shift, max_shift + 1))
        dx = int(rng.integers(-max_shift, max_shift + 1))
        m = _shift(m, dy, dx)
    return m.astype(np.float32)

def _add_or_remove(mask, rng):
    h, w = mask.shape
    if rng.random() < 0.5:
        # random ellipse capped at 5% of the frame area
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        for _ in range(20):
            a = rng.uniform(0.03, 0.13) * h
            b = rng.uniform(0.03, 0.13) * w
            if np.pi * a * b <= 0.05 * h * w:
                break
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        theta = rng.uniform(0.0, np.pi)
        return mask | _ellipse_mask(h, cy, cx, a, b, theta, yy, xx), "add_ellipse"
    labels, n = ndimage.label(mask, structure=_CROSS)
    if n == 0:
        return mask, "remove_component"
    drop = int(rng.integers(1, n + 1))
    return mask & (labels != drop), "remove_component"

def corrupt_mask(mask, rng):
    """Degrade a binary mask with a random non-empty subset of the four
    corruption families. Returns (corrupted, ops) where ops names what was
    applied; an empty input comes back unchanged with ops == ["empty_input"].
    """
    m = np.asarray(mask)
    binary = m.astype(bool)
    if not np.array_equal(binary.astype(m.dtype), m.astype(m.dtype)) and \
            np.setdiff1d(np.unique(m), [0, 1]).size:
        raise ConfigError("corrupt_mask expects a binary mask")
    if not binary.any():
        return m.copy(), ["empty_input"]
    # pick a uniformly random non-empty subset of {swap, morph, resize, shape}
    pick = int(rng.integers(1, 16))
    chosen = [(pick >> i) & 1 for i in range(4)]
    out = binary
    ops = []
    if chosen[0]:
        out = _boundary_swap(out, rng)
        ops.append("boundary_swap")
    if chosen[1]:
        out, name = _morph(out, rng)
        ops.append(name)
    if chosen[2]:
        out = _resize_about_centroid(out, rng)
        ops.append("resize")
    if chosen[3]:
        out, name = _add_or_remove(out, rng)
        ops.append(name)
    return out.astype(np.float32), ops


# ---------------------------------------------------------------------------
# batching

def _pool_cycle(pool, rng):
    while True:
        for j in rng.permutation(len(pool)):
            yield pool[j]

def make_batches(labeled, unlabeled, batch_size, rng):
    """Endless stream of (labeled_part, unlabeled_part) batches.

    Each batch carries batch_size/2 items from each pool; with no unlabeled
    pool the whole batch is labeled. Pools reshuffle each pass.
    """
    if not labeled:
        raise ConfigError("labeled pool is empty")
    if batch_size < 2 or batch_size % 2:
        raise ConfigError("batch_size must be even and >= 2")
    lab_it = _pool_cycle(list(labeled), rng)
    if unlabeled:
        unl_it = _pool_cycle(list(unlabeled), rng)
        half = batch_size // 2
        while True:
            yield ([next(lab_it) for _ in range(half)],
                   [next(unl_it) for _ in range(half)])
    else:
        while True:
            yield ([next(lab_it) for _ in range(batch_size)], [])
