"""Segmentation metrics (DSC, 95th-percentile Hausdorff), sliding-window
inference, per-run evaluation, and cross-run summaries.

Distances are in pixels. HD95 follows the surface-distance convention:
boundary pixels are foreground pixels with at least one background 4-neighbor
(pixels outside the frame count as background), directed nearest-surface
distances are pooled from both directions, and the 95th percentile uses
linear interpolation between order statistics.
"""

import csv
import json
import os

import numpy as np

from . import checkpoint, nets
from . import tensor as T
from .errors import ConfigError, EmptyMaskError, ShapeError

PERSAMPLE_HEADER = "run_id,method,seed,sample_id,dsc,hd95,flag"
SUMMARY_HEADER = "method,N,M,dsc_mean,dsc_std,hd95_mean,hd95_std,inferences_per_step"


def _as_binary(mask, name):
    m = np.asarray(mask)
    if m.dtype != bool:
        m = m > 0.5
    return m

def dsc(pred, gt):
    """Dice score in percent. Two empty masks agree perfectly by convention."""
    a = _as_binary(pred, "pred")
    b = _as_binary(gt, "gt")
    if a.shape != b.shape:
        raise ShapeError("mask shapes differ: %r vs %r" % (a.shape, b.shape))
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 100.0
    inter = int((a & b).sum())
    return 100.0 * 2.0 * inter / (na + nb)


def boundary_pixels(mask):
    """Foreground pixels with a background 4-neighbor; frame edge counts as
    background. Returns an [n,2] array of (row, col) coordinates."""
    m = _as_binary(mask, "mask")
    padded = np.pad(m, 1, mode="constant")
    core = padded[1:-1, 1:-1]
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    edge = core & ~interior
    return np.argwhere(edge)

def hd95(pred, gt):
    """95th percentile of pooled directed nearest-boundary distances."""
    a = _as_binary(pred, "pred")
    b = _as_binary(gt, "gt")
    if a.shape != b.shape:
        raise ShapeError("mask shapes differ: %r vs %r" % (a.shape, b.shape))
    if not a.any() or not b.any():
        raise EmptyMaskError("hd95 needs two non-empty masks")
    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    ab = np.sqrt(d2.min(axis=1))
    ba = np.sqrt(d2.min(axis=0))
    pooled = np.concatenate([ab, ba])
    # 95th percentile with linear interpolation between order statistics
    return float(np.percentile(pooled, 95))


def _window_starts(extent, window, stride):
    if extent == window:
        return [0]
    starts = list(range(0, extent - window, stride))
    starts.append(extent - window)  # snap the last window to the border
    return starts

def sliding_window_infer(params, image, window, stride, forward=None):
    """Average softmax probabilities over a window tiling of the image.

    `image` is [1,H,W]; returns ([C,H,W] probability map, [H,W] mask).
    `forward` defaults to the segmentation net in eval mode and exists so
    tests can substitute a known oracle.
    """
    img = np.asarray(image, dtype=np.float32)
    _, h, w = img.shape
    if window > min(h, w):
        raise ShapeError("window %d exceeds image %dx%d" % (window, h, w))
    if stride > window or stride < 1:
        raise ShapeError("stride must be in [1, window]")
    if forward is None:
        def forward(tile):
            with T.no_grad():
                logits = nets.seg_forward(params, T.constant(tile),
                                          mode="eval")
                return T.softmax_channel(logits).data[0]
    acc = None
    count = np.zeros((h, w), dtype=np.float64)
    for y0 in _window_starts(h, window, stride):
        for x0 in _window_starts(w, window, stride):
            tile = img[None, :, y0:y0 + window, x0:x0 + window]
            p = np.asarray(forward(np.ascontiguousarray(tile)),
                           dtype=np.float64)
            if acc is None:
                acc = np.zeros((p.shape[0], h, w), dtype=np.float64)
            acc[:, y0:y0 + window, x0:x0 + window] += p
            count[y0:y0 + window, x0:x0 + window] += 1.0
    prob = acc / count[None]
    mask = (prob[1] > 0.5).astype(np.float32)
    return prob, mask


def dae_reconstruction_gain(dae_params, masks, rng, crop=64, draws=5):
    """Measure how much denoising a trained DAE adds over raw corruption.

    Center-crops each held-out mask, corrupts it `draws` independent times,
    reconstructs each draw with the DAE (binarized at 0.5), and returns
    (mean DSC of reconstruction vs clean, mean DSC of corrupted input vs
    clean). Corruption severity varies a lot draw to draw, so averaging
    several draws per mask keeps the comparison stable.
    """
    from . import data  # late import: eval is otherwise metric-only

    if draws < 1:
        raise ConfigError("draws must be >= 1")
    recon_scores = []
    corrupt_scores = []
    for m in masks:
        h, w = m.shape
        y0, x0 = (h - crop) // 2, (w - crop) // 2
        clean = m[y0:y0 + crop, x0:x0 + crop]
        for _ in range(draws):
            corrupted, _ops = data.corrupt_mask(clean, rng)
            with T.no_grad():
                out = nets.dae_forward(
                    dae_params,
                    T.constant(corrupted[None, None].astype(np.float32)),
                ).data[0, 0]
            recon = out > 0.5
            recon_scores.append(dsc(recon, clean))
            corrupt_scores.append(dsc(corrupted, clean))
    return float(np.mean(recon_scores)), float(np.mean(corrupt_scores))


class MetricsRecord:
    """Per-sample metric rows for one (run, seed) plus run bookkeeping."""

    def __init__(self, run_id, method, seed, N, M):
        self.run_id = run_id
        self.method = method
        self.seed = seed
        self.N = N
        self.M = M
        self.rows = []  # (sample_id, dsc, hd95_or_None, flag)
        self.teacher_inferences = 0
        self.t_max = 0

    def add(self, sample_id, d, h, flag=""):
        if not 0.0 <= d <= 100.0:
            raise ValueError("dsc out of range")
        if h is not None and h < 0:
            raise ValueError("hd95 must be >= 0")
        self.rows.append((sample_id, float(d), h, flag))

    def dsc_mean(self):
        return float(np.mean([r[1] for r in self.rows]))

    def hd95_mean(self):
        vals = [r[2] for r in self.rows if r[2] is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def flagged(self):
        return [r[0] for r in self.rows if r[3]]

    def summary_dict(self):
        return {
            "run_id": self.run_id,
            "method": self.method,
            "seed": self.seed,
            "N": self.N,
            "M": self.M,
            "dsc_mean": self.dsc_mean(),
            "hd95_mean": self.hd95_mean(),
            "num_samples": len(self.rows),
            "flagged": self.flagged(),
            "teacher_inferences": self.teacher_inferences,
            "t_max": self.t_max,
        }


def evaluate_run(ckpt_path, test_samples, config, seed=0, run_id=None,
                 params=None):
    """Score a checkpoint on the test set with sliding-window inference.

    Samples where HD95 is undefined (an empty mask on either side) keep
    their DSC, carry a flag naming the empty side, and are excluded from the
    HD95 mean; they are never dropped from the per-sample rows.
    """
    if params is None:
        params = checkpoint.load_params(
            ckpt_path, nets.SegNetConfig().architecture_id
        )
    rec = MetricsRecord(run_id or config.run_id or config.method,
                        config.method, seed,
                        config.split.N_labeled, config.split.M_unlabeled)
    for s in test_samples:
        _, pred = sliding_window_infer(params, s.image, config.window,
                                       config.stride)
        d = dsc(pred, s.mask)
        try:
            h = hd95(pred, s.mask)
            flag = ""
        except EmptyMaskError:
            h = None
            flag = "empty_pred" if not pred.any() else "empty_gt"
        rec.add(s.id, d, h, flag)
    return rec


def write_persample_csv(path, record):
    with open(path, "w") as f:
        f.write(PERSAMPLE_HEADER + "\n")
        for sid, d, h, flag in record.rows:
            f.write("%s,%s,%d,%s,%s,%s,%s\n" % (
                record.run_id, record.method, record.seed, sid,
                repr(d), "nan" if h is None else repr(h), flag,
            ))

def read_persample_csv(path):
    with open(path) as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != PERSAMPLE_HEADER.split(","):
            raise IOError("%s: unexpected header" % path)
        return list(reader)


def load_record(seed_dir):
    """Rebuild a MetricsRecord from a seed directory's emitted files."""
    with open(os.path.join(seed_dir, "metrics.json")) as f:
        meta = json.load(f)
    rec = MetricsRecord(meta["run_id"], meta["method"], meta["seed"],
                        meta["N"], meta["M"])
    rec.teacher_inferences = meta["teacher_inferences"]
    rec.t_max = meta["t_max"]
    for row in read_persample_csv(os.path.join(seed_dir, "persample.csv")):
        h = None if row["hd95"] == "nan" else float(row["hd95"])
        rec.add(row["sample_id"], float(row["dsc"]), h, row["flag"])
    return rec


def compare_runs(records, inferences_per_step=None):
    """Aggregate per-seed records into one summary row per run.

    Rows are keyed by run_id (which defaults to the method name, so a plain
    method comparison reads like a results table, while sweep children stay
    distinct). Seed-level DSC/HD95 means are averaged across seeds with
    population standard deviation. The inference rate column reports
    teacher-side forwards per step, derived from the recorded counters.
    """
    by_method = {}
    for r in records:
        by_method.setdefault(r.run_id, []).append(r)
    lines = [SUMMARY_HEADER]
    for method in sorted(by_method):
        group = sorted(by_method[method], key=lambda r: r.seed)
        dscs = np.array([r.dsc_mean() for r in group], dtype=np.float64)
        hds = np.array([r.hd95_mean() for r in group], dtype=np.float64)
        if inferences_per_step is not None:
            rate = float(inferences_per_step[method])
        else:
            rates = {
                r.teacher_inferences / r.t_max if r.t_max else 0.0
                for r in group
            }
            rate = rates.pop() if len(rates) == 1 else float("nan")
        n, m = group[0].N, group[0].M
        lines.append("%s,%d,%d,%s,%s,%s,%s,%s" % (
            method, n, m,
            repr(float(dscs.mean())), repr(float(dscs.std())),
            repr(float(np.nanmean(hds))), repr(float(np.nanstd(hds))),
            repr(rate),
        ))
    return "\n".join(lines) + "\n"
