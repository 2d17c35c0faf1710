"""Segmentation network (2d V-net analog) and the mask-denoising autoencoder.

Both nets are functional: parameters live in a ModelParams collection and
the forward passes are free functions of (params, input). The architecture
is recovered from the `architecture_id` string, so a parameter set is
self-describing once paired with its checkpoint.

Segmentation net: encoder of `depth` levels, two 3x3 conv + group-norm +
relu blocks per level, stride-2 conv downsamples, mirrored decoder with 2x2
stride-2 transposed convs and additive skips, 1x1 conv head. Dropout sits
on the two deepest levels (bottom blocks and the first decoder stage).

DAE: same block vocabulary, no skips, and a dense bottleneck so all
information passes through a small latent vector; sigmoid output.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ShapeError

GN_GROUPS = 4


@dataclass
class SegNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 8
    depth: int = 4
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"segnet depth must be >= 2, got {self.depth}")
        if self.num_classes < 2:
            raise ConfigError(f"segnet num_classes must be >= 2, got {self.num_classes}")

    @property
    def architecture_id(self):
        return (f"seg2d:in={self.in_channels},c={self.num_classes},"
                f"w={self.base_width},d={self.depth},p={self.dropout_p:g}")


@dataclass
class DaeConfig:
    latent_dim: int = 64
    in_channels: int = 1
    depth: int = 4
    base_width: int = 8
    side: int = 64

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError(f"dae latent_dim must be >= 1, got {self.latent_dim}")
        if self.side % (1 << (self.depth - 1)) != 0:
            raise ConfigError(f"dae side {self.side} not divisible by 2^{self.depth - 1}")

    @property
    def architecture_id(self):
        return (f"dae2d:in={self.in_channels},latent={self.latent_dim},"
                f"w={self.base_width},d={self.depth},side={self.side}")


def _parse_arch_id(arch_id):
    kind, _, rest = arch_id.partition(":")
    kv = {}
    for part in rest.split(","):
        k, _, v = part.partition("=")
        kv[k] = v
    if kind == "seg2d":
        return SegNetConfig(
            in_channels=int(kv["in"]), num_classes=int(kv["c"]),
            base_width=int(kv["w"]), depth=int(kv["d"]), dropout_p=float(kv["p"]),
        )
    if kind == "dae2d":
        return DaeConfig(
            latent_dim=int(kv["latent"]), in_channels=int(kv["in"]),
            depth=int(kv["d"]), base_width=int(kv["w"]), side=int(kv["side"]),
        )
    raise ConfigError(f"unknown architecture id {arch_id!r}")


class ModelParams:
    """Named, ordered parameter tensors plus optimizer momentum buffers."""

    def __init__(self, architecture_id, entries):
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names")
        self.architecture_id = architecture_id
        self._names = names
        self._tensors = dict(entries)
        self.momentum = {}

    def items(self):
        for n in self._names:
            yield n, self._tensors[n]

    def names(self):
        return list(self._names)

    def __getitem__(self, name):
        return self._tensors[name]

    def __len__(self):
        return len(self._names)

    def copy(self, requires_grad=None):
        entries = [(n, t.copy(requires_grad=requires_grad)) for n, t in self.items()]
        return ModelParams(self.architecture_id, entries)

    def num_values(self):
        return sum(t.size for _, t in self.items())


# ---------------------------------------------------------------- init

def _he_conv(rng, co, ci, k, dtype):
    std = np.sqrt(2.0 / (ci * k * k))
    return rng.normal(0.0, std, size=(co, ci, k, k)).astype(dtype)


def _he_tconv(rng, ci, co, k, dtype):
    std = np.sqrt(2.0 / (ci * k * k))
    return rng.normal(0.0, std, size=(ci, co, k, k)).astype(dtype)


def _he_linear(rng, out_f, in_f, dtype):
    std = np.sqrt(2.0 / in_f)
    return rng.normal(0.0, std, size=(out_f, in_f)).astype(dtype)


class _ParamBuilder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.entries = []

    def _add(self, name, arr):
        self.entries.append((name, T.Tensor(arr, requires_grad=True)))

    def conv(self, prefix, ci, co, k):
        self._add(f"{prefix}.w", _he_conv(self.rng, co, ci, k, self.dtype))
        self._add(f"{prefix}.b", np.zeros(co, dtype=self.dtype))

    def tconv(self, prefix, ci, co, k):
        self._add(f"{prefix}.w", _he_tconv(self.rng, ci, co, k, self.dtype))
        self._add(f"{prefix}.b", np.zeros(co, dtype=self.dtype))

    def gn(self, prefix, c):
        self._add(f"{prefix}.g", np.ones(c, dtype=self.dtype))
        self._add(f"{prefix}.beta", np.zeros(c, dtype=self.dtype))

    def linear(self, prefix, in_f, out_f):
        self._add(f"{prefix}.w", _he_linear(self.rng, out_f, in_f, self.dtype))
        self._add(f"{prefix}.b", np.zeros(out_f, dtype=self.dtype))

    def block(self, prefix, ci, co):
        self.conv(f"{prefix}.conv", ci, co, 3)
        self.gn(f"{prefix}.gn", co)


def _seg_widths(cfg):
    return [cfg.base_width * (1 << l) for l in range(cfg.depth)]


def init_seg_params(cfg: SegNetConfig, rng) -> ModelParams:
    """He-initialized segmentation net parameters, deterministic per seed."""
    pb = _ParamBuilder(rng, np.float32)
    w = _seg_widths(cfg)
    for l in range(cfg.depth):
        ci = cfg.in_channels if l == 0 else w[l]
        pb.block(f"enc{l}.b0", ci, w[l])
        pb.block(f"enc{l}.b1", w[l], w[l])
        if l < cfg.depth - 1:
            pb.conv(f"down{l}.conv", w[l], w[l + 1], 3)
            pb.gn(f"down{l}.gn", w[l + 1])
    for l in range(cfg.depth - 2, -1, -1):
        pb.tconv(f"up{l}.tconv", w[l + 1], w[l], 2)
        pb.gn(f"up{l}.gn", w[l])
        pb.block(f"dec{l}.b0", w[l], w[l])
        pb.block(f"dec{l}.b1", w[l], w[l])
    pb.conv("head", w[0], cfg.num_classes, 1)
    return ModelParams(cfg.architecture_id, pb.entries)


def init_dae_params(cfg: DaeConfig, rng) -> ModelParams:
    pb = _ParamBuilder(rng, np.float32)
    w = [cfg.base_width * (1 << l) for l in range(cfg.depth)]
    for l in range(cfg.depth):
        ci = cfg.in_channels if l == 0 else w[l]
        pb.block(f"enc{l}", ci, w[l])
        if l < cfg.depth - 1:
            pb.conv(f"down{l}.conv", w[l], w[l + 1], 3)
            pb.gn(f"down{l}.gn", w[l + 1])
    bottom_side = cfg.side >> (cfg.depth - 1)
    flat = w[-1] * bottom_side * bottom_side
    pb.linear("fc_in", flat, cfg.latent_dim)
    pb.linear("fc_out", cfg.latent_dim, flat)
    for l in range(cfg.depth - 2, -1, -1):
        pb.tconv(f"up{l}.tconv", w[l + 1], w[l], 2)
        pb.gn(f"up{l}.gn", w[l])
        pb.block(f"dec{l}", w[l], w[l])
    pb.conv("out", w[0], cfg.in_channels, 1)
    return ModelParams(cfg.architecture_id, pb.entries)


# ---------------------------------------------------------------- forward

def _conv_block(p, prefix, h, stride=1, padding=1):
    h = T.conv2d(h, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], stride=stride, padding=padding)
    h = T.group_norm(h, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.beta"], GN_GROUPS)
    return T.relu(h)


def _up_block(p, prefix, h):
    h = T.transposed_conv2d(h, p[f"{prefix}.tconv.w"], p[f"{prefix}.tconv.b"], stride=2)
    h = T.group_norm(h, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.beta"], GN_GROUPS)
    return T.relu(h)


_SEG_MODES = ("train", "eval", "mc_dropout")


def seg_forward(params: ModelParams, image, mode, rng=None):
    """Segmentation logits [B,C,H,W]; dropout active in train / mc_dropout."""
    cfg = _parse_arch_id(params.architecture_id)
    if not isinstance(cfg, SegNetConfig):
        raise ConfigError(f"seg_forward on non-segmentation params {params.architecture_id!r}")
    if mode not in _SEG_MODES:
        raise ConfigError(f"seg_forward: mode must be one of {_SEG_MODES}, got {mode!r}")
    drop_on = mode in ("train", "mc_dropout") and cfg.dropout_p > 0
    if drop_on and rng is None:
        raise ConfigError("seg_forward: dropout-active mode needs an rng")
    if image.data.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ShapeError(f"seg_forward: expected [B,{cfg.in_channels},H,W], got {image.shape}")
    div = 1 << (cfg.depth - 1)
    if image.shape[2] % div or image.shape[3] % div:
        raise ShapeError(f"seg_forward: spatial dims {image.shape[2:]}, must divide {div}")

    h = image
    skips = []
    for l in range(cfg.depth):
        h = _conv_block(params, f"enc{l}.b0", h)
        h = _conv_block(params, f"enc{l}.b1", h)
        if l == cfg.depth - 1:
            h = T.dropout(h, cfg.dropout_p, rng, drop_on)
        else:
            skips.append(h)
            h = _conv_block(params, f"down{l}", h, stride=2, padding=1)
    for l in range(cfg.depth - 2, -1, -1):
        h = _up_block(params, f"up{l}", h)
        h = T.add(h, skips[l])
        h = _conv_block(params, f"dec{l}.b0", h)
        h = _conv_block(params, f"dec{l}.b1", h)
        if l == cfg.depth - 2:
            h = T.dropout(h, cfg.dropout_p, rng, drop_on)
    return T.conv2d(h, params["head.w"], params["head.b"], stride=1, padding=0)


def dae_forward(params: ModelParams, prob_map, patch_latent=None):
    """Reconstruction of a foreground-probability map through the bottleneck.

    `patch_latent` (tests only) replaces the latent activation, e.g. with
    zeros, to show the output depends on the input through the latent alone.
    """
    cfg = _parse_arch_id(params.architecture_id)
    if not isinstance(cfg, DaeConfig):
        raise ConfigError(f"dae_forward on non-DAE params {params.architecture_id!r}")
    if prob_map.data.ndim != 4 or prob_map.shape[1] != cfg.in_channels:
        raise ShapeError(f"dae_forward: expected [B,{cfg.in_channels},H,W], got {prob_map.shape}")
    if prob_map.shape[2] != cfg.side or prob_map.shape[3] != cfg.side:
        raise ShapeError(f"dae_forward: dense bottleneck pins input to {cfg.side}x{cfg.side}")
    lo, hi = float(prob_map.data.min()), float(prob_map.data.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise DomainError(f"dae_forward: input must lie in [0,1], got range [{lo:g},{hi:g}]")

    h = prob_map
    for l in range(cfg.depth):
        h = _conv_block(params, f"enc{l}", h)
        if l < cfg.depth - 1:
            h = _conv_block(params, f"down{l}", h, stride=2, padding=1)
    bsz = h.shape[0]
    h = T.reshape(h, (bsz, h.size // bsz))
    latent = T.linear(h, params["fc_in.w"], params["fc_in.b"])
    if patch_latent is not None:
        latent = T.constant(np.broadcast_to(np.asarray(patch_latent, dtype=latent.dtype),
                                            latent.shape).copy())
    h = T.relu(latent)
    h = T.relu(T.linear(h, params["fc_out.w"], params["fc_out.b"]))
    w = cfg.base_width * (1 << (cfg.depth - 1))
    side = cfg.side >> (cfg.depth - 1)
    h = T.reshape(h, (bsz, w, side, side))
    for l in range(cfg.depth - 2, -1, -1):
        h = _up_block(params, f"up{l}", h)
        h = _conv_block(params, f"dec{l}", h)
    h = T.conv2d(h, params["out.w"], params["out.b"], stride=1, padding=0)
    return T.sigmoid(h)
