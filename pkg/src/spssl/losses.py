"""Training objectives and uncertainty estimators.

Supervised side: equal-weight cross-entropy plus soft Dice. Consistency side:
the reliability-weighted mean of per-voxel squared prediction differences,
where the weight comes from one of three schemes: exp(-gamma * U) with U from
a single denoising-autoencoder pass, the same with U from K MC-dropout
entropy passes, or a warmed-up hard threshold on U.

Uncertainty maps and teacher outputs are constants as far as the graph is
concerned: no gradient ever reaches teacher or DAE parameters.
"""

import numpy as np

from . import nets
from . import tensor as T
from .errors import (ConfigError, DegenerateWeightError, DomainError,
                     ShapeError)

DICE_SMOOTH = 1e-5


class UncertaintyMap:
    """Per-voxel uncertainty [B,H,W] plus the forward-pass count it cost.

    method dae_l2 always costs exactly 1 inference; entropy costs K. The
    counter is what the training loop adds to its cumulative budget.
    """

    __slots__ = ("values", "method", "inference_count")

    def __init__(self, values, method, inference_count):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 3:
            raise ShapeError("uncertainty values must be [B,H,W]")
        if values.min() < 0:
            raise DomainError("uncertainty must be nonnegative")
        if method not in ("dae_l2", "entropy", "none"):
            raise ConfigError("unknown uncertainty method %r" % (method,))
        if method == "dae_l2" and inference_count != 1:
            raise ConfigError("dae_l2 must report exactly 1 inference")
        if method == "entropy" and inference_count < 2:
            raise ConfigError("entropy must report K >= 2 inferences")
        if method == "none" and inference_count != 0:
            raise ConfigError("method none costs no inferences")
        self.values = values
        self.method = method
        self.inference_count = int(inference_count)


class ConsistencyWeights:
    __slots__ = ("values", "scheme")

    def __init__(self, values, scheme):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 3:
            raise ShapeError("weights must be [B,H,W]")
        if scheme not in ("exp_weight", "threshold_mask"):
            raise ConfigError("unknown weighting scheme %r" % (scheme,))
        if values.min() < 0 or values.max() > 1:
            raise DomainError("weights must lie in [0,1]")
        if scheme == "threshold_mask":
            if np.setdiff1d(np.unique(values), [0.0, 1.0]).size:
                raise DomainError("threshold weights must be 0/1")
        self.values = values
        self.scheme = scheme


def one_hot(target, num_classes):
    """Class-id map [B,H,W] (integral values) -> one-hot [B,C,H,W] float32."""
    t = np.asarray(target)
    ids = np.rint(t).astype(np.int64)
    if not np.array_equal(ids.astype(t.dtype), t):
        raise DomainError("target class ids must be integral")
    if ids.min() < 0 or ids.max() >= num_classes:
        raise DomainError(
            "class id out of range [0, %d)" % num_classes
        )
    out = np.zeros((ids.shape[0], num_classes) + ids.shape[1:],
                   dtype=np.float32)
    for c in range(num_classes):
        out[:, c] = ids == c
    return out


def _channel_sum(t):
    # [B,C,H,W] -> [B,H,W] by summing channels through narrow/reshape
    b, c, h, w = t.shape
    total = None
    for ch in range(c):
        plane = T.reshape(T.narrow(t, 1, ch, 1), (b, h, w))
        total = plane if total is None else T.add(total, plane)
    return total


def dice_loss(prob, target_onehot):
    """Soft Dice loss on the foreground channel, averaged over the batch."""
    q = np.asarray(target_onehot, dtype=prob.data.dtype)
    if q.shape != prob.shape:
        raise ShapeError(
            "target %r does not match prob %r" % (q.shape, prob.shape)
        )
    b = prob.shape[0]
    p_fg = T.narrow(prob, 1, 1, 1)
    q_fg = T.constant(np.ascontiguousarray(q[:, 1:2]))
    inter = T.sum_per_sample(T.mul(p_fg, q_fg))
    denom = T.add(T.sum_per_sample(p_fg), T.sum_per_sample(q_fg))
    dice = T.div(T.scalar_add(T.scalar_mul(inter, 2.0), DICE_SMOOTH),
                 T.scalar_add(denom, DICE_SMOOTH))
    loss_per = T.scalar_add(T.scalar_mul(dice, -1.0), 1.0)
    return T.scalar_mul(T.sum_all(loss_per), 1.0 / b)


def ce_loss(logits, target):
    """Mean cross-entropy over all voxels; target is a class-id map."""
    onehot = one_hot(target, logits.shape[1])
    logp = T.log_softmax_channel(logits)
    picked = T.mul(logp, T.constant(onehot.astype(logits.data.dtype)))
    n_vox = logits.shape[0] * logits.shape[2] * logits.shape[3]
    return T.scalar_mul(T.sum_all(picked), -1.0 / n_vox)


def supervised_loss(logits, target):
    """0.5 * cross-entropy + 0.5 * Dice on softmax probabilities."""
    ce = ce_loss(logits, target)
    dice = dice_loss(T.softmax_channel(logits), one_hot(target, logits.shape[1]))
    return T.scalar_mul(T.add(ce, dice), 0.5)


def dae_recon_loss(recon, clean):
    c = np.asarray(clean, dtype=recon.data.dtype)
    if c.shape != recon.shape:
        raise ShapeError(
            "clean %r does not match recon %r" % (c.shape, recon.shape)
        )
    d = T.sub(recon, T.constant(c))
    return T.mean_all(T.mul(d, d))


def dae_uncertainty(p_t_fg, dae_params):
    """U = (dae(p) - p)^2 on the foreground probability, one forward pass."""
    p = np.asarray(p_t_fg, dtype=np.float32)
    if p.ndim != 4 or p.shape[1] != 1:
        raise ShapeError("expected [B,1,H,W] foreground probability")
    with T.no_grad():
        recon = nets.dae_forward(dae_params, T.constant(p))
    u = (recon.data - p) ** 2
    return UncertaintyMap(u[:, 0], "dae_l2", 1)


def entropy_uncertainty(seg_params, image, K, rng):
    """Predictive entropy of the mean softmax over K MC-dropout passes."""
    if K < 2:
        raise ConfigError("entropy uncertainty needs K >= 2, got %d" % K)
    img = np.asarray(image, dtype=np.float32)
    mu = None
    with T.no_grad():
        x = T.constant(img)
        for _ in range(K):
            p = T.softmax_channel(
                nets.seg_forward(seg_params, x, mode="mc_dropout", rng=rng)
            ).data
            mu = p if mu is None else mu + p
    mu = mu / K
    ent = np.where(mu > 0, -mu * np.log(mu), 0.0).sum(axis=1)
    return UncertaintyMap(ent, "entropy", K)


def uniform_weights(shape_bhw):
    return ConsistencyWeights(np.ones(shape_bhw, dtype=np.float32),
                              "exp_weight")


def reliability_weights(U, gamma):
    if gamma <= 0:
        raise ConfigError("gamma must be positive, got %r" % (gamma,))
    return ConsistencyWeights(np.exp(-gamma * U.values), "exp_weight")


def threshold_schedule(t, t_max, u_max):
    return u_max * (0.75 + 0.25 * np.exp(-5.0 * (1.0 - t / t_max) ** 2))


def threshold_weights(U, t, t_max, u_max):
    """Hard mask: 1 where U is below the warmed-up threshold H(t)."""
    if u_max <= 0:
        raise ConfigError("u_max must be positive")
    h = threshold_schedule(t, t_max, u_max)
    return ConsistencyWeights((U.values < h).astype(np.float32),
                              "threshold_mask")


def consistency_loss(p_s, p_t, weights):
    """Reliability-weighted consistency between student and teacher.

    Per sample: sum_v w_v * ||p_s_v - p_t_v||^2 / sum_v w_v, with the voxel
    difference summed over channels; the batch result is the sample mean.
    Teacher probabilities and weights enter as constants.
    """
    pt = p_t.data if isinstance(p_t, T.Tensor) else np.asarray(p_t)
    pt = pt.astype(p_s.data.dtype)
    if pt.shape != p_s.shape:
        raise ShapeError(
            "teacher %r does not match student %r" % (pt.shape, p_s.shape)
        )
    w = weights.values.astype(p_s.data.dtype)
    if w.shape != (p_s.shape[0],) + p_s.shape[2:]:
        raise ShapeError("weights %r do not match predictions" % (w.shape,))
    w_sums = w.reshape(w.shape[0], -1).sum(axis=1)
    if (w_sums <= 0).any():
        raise DegenerateWeightError(
            "a sample has zero total consistency weight"
        )
    d = T.sub(p_s, T.constant(pt))
    sq = _channel_sum(T.mul(d, d))
    weighted = T.sum_per_sample(T.mul(sq, T.constant(w)))
    per_sample = T.div(weighted, T.constant(w_sums.astype(p_s.data.dtype)))
    return T.scalar_mul(T.sum_all(per_sample), 1.0 / p_s.shape[0])
