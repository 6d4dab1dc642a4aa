"""Channel-attention blocks built from four small operators.

The pipeline shared by all blocks is

    aggregate   N x C x H x W -> N x C     spatial mean (global context)
    normalize   N x C -> N x C             group-wise standardization
    transform   N x C -> N x C             per-channel affine w*zhat + b
    fuse        gate = sigmoid(scores), Y = X * gate (broadcast)

An SE block replaces normalize+transform with a two-layer bottleneck MLP; an
LCT block uses exactly the pipeline above; SE+ runs normalize before the SE
bottleneck.  Each operator has a hand-derived backward so whole blocks are
gradient-checkable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .layers import Layer, Linear, ParamRegistry, ReLU
from .rng import Rng
from .tensor import ShapeError, sigmoid

log = logging.getLogger("lctnet.attention")

KINDS = ("none", "se", "lct", "se_plus")
INIT_MODES = ("w0_b1", "w0_b0", "w1_b0")


class GroupError(ValueError):
    """Channel count is not divisible into the requested groups."""


@dataclass
class AttentionConfig:
    kind: str = "lct"
    channels: int = 0
    reduction: int = 16
    groups: int = 64
    epsilon: float = 1e-5
    init_mode: str = "w0_b1"
    skip_normalize: bool = False
    skip_transform: bool = False

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "none":
            return
        if self.channels <= 0:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.kind in ("se", "se_plus"):
            if self.reduction <= 0:
                raise ValueError(f"reduction must be positive, got {self.reduction}")
            if self.channels % self.reduction != 0 or self.channels < self.reduction:
                raise ValueError(
                    f"channels {self.channels} not reducible by r={self.reduction}"
                )
        if self.kind in ("lct", "se_plus"):
            if self.groups <= 0:
                raise ValueError(f"groups must be positive, got {self.groups}")
            if self.init_mode not in INIT_MODES:
                raise ValueError(f"unknown init mode {self.init_mode!r}; expected one of {INIT_MODES}")
            g_eff = min(self.groups, self.channels)
            if self.channels % g_eff != 0:
                raise GroupError(
                    f"channels {self.channels} not divisible into {g_eff} groups"
                )

    def effective_groups(self) -> int:
        """Group count clamped to the channel width, logging when it clamps."""
        g_eff = min(self.groups, self.channels)
        if g_eff != self.groups:
            log.warning(
                "groups=%d exceeds channel width %d; clamping to G_eff=%d",
                self.groups, self.channels, g_eff,
            )
        return g_eff


def aggregate(x: np.ndarray) -> np.ndarray:
    """Global average pooling: z[n, k] = spatial mean of channel k."""
    if x.ndim != 4:
        raise ShapeError(f"aggregate: expected N x C x H x W, got {x.shape}")
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"aggregate: empty spatial extent in {x.shape}")
    return x.mean(axis=(2, 3))


def aggregate_backward(dz: np.ndarray, x_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = x_shape
    return np.broadcast_to(dz.reshape(n, c, 1, 1) / (h * w), x_shape).copy()


def _grouped(z: np.ndarray, g_eff: int) -> np.ndarray:
    n, c = z.shape
    if c % g_eff != 0:
        raise GroupError(f"channels {c} not divisible into {g_eff} groups")
    return z.reshape(n, g_eff, c // g_eff)


def normalize(z: np.ndarray, g_eff: int, eps: float = 1e-5) -> np.ndarray:
    """Standardize each contiguous group of m = C/G channels per sample.

    The group standard deviation is sqrt(biased variance + eps); a group of
    size one therefore maps to zero.
    """
    zhat, _ = normalize_with_cache(z, g_eff, eps)
    return zhat


def normalize_with_cache(z: np.ndarray, g_eff: int, eps: float):
    g = _grouped(z, g_eff)
    mu = g.mean(axis=2, keepdims=True)
    var = ((g - mu) ** 2).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    zhat = ((g - mu) * inv).reshape(z.shape)
    return zhat, inv


def normalize_backward(dzhat: np.ndarray, zhat: np.ndarray, inv: np.ndarray,
                       g_eff: int) -> np.ndarray:
    """Exact gradient through the group standardization.

    With y = (z - mu) * inv the chain collapses to
    dz = inv * (dy - mean(dy) - y * mean(dy * y)), means taken per group.
    """
    dy = _grouped(dzhat, g_eff)
    y = _grouped(zhat, g_eff)
    m1 = dy.mean(axis=2, keepdims=True)
    m2 = (dy * y).mean(axis=2, keepdims=True)
    return (inv * (dy - m1 - y * m2)).reshape(dzhat.shape)


def transform(zhat: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-channel affine map producing importance scores a = w * zhat + b."""
    if zhat.ndim != 2 or w.shape != (zhat.shape[1],) or b.shape != w.shape:
        raise ShapeError(f"transform: zhat {zhat.shape} vs w {w.shape}, b {b.shape}")
    return w * zhat + b


def fuse(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Rescale feature maps by their channels' attention activations."""
    if x.ndim != 4 or a.shape != x.shape[:2]:
        raise ShapeError(f"fuse: x {x.shape} vs scores {a.shape}")
    return x * sigmoid(a)[:, :, None, None]


class AttentionBlock(Layer):
    """Common capture plumbing: last per-sample context and gate vectors."""

    kind = "none"

    def __init__(self):
        super().__init__()
        self.capture = False
        self.last_z: np.ndarray | None = None
        self.last_gate: np.ndarray | None = None

    def _record(self, z: np.ndarray, gate: np.ndarray) -> None:
        if self.capture:
            self.last_z = z.copy()
            self.last_gate = gate.copy()


class NoneBlock(AttentionBlock):
    """Identity pass-through, instrumented with a unit gate for analysis."""

    kind = "none"

    def forward(self, x, train=True):
        if self.capture:
            z = aggregate(x)
            self._record(z, np.ones_like(z))
        self._cache = ()
        return x

    def backward(self, dy):
        self._take_cache()
        return dy


class LCTBlock(AttentionBlock):
    """Gate each channel from a normalized global context via w*zhat + b.

    Ablations: skip_normalize feeds raw context to the affine map;
    skip_transform passes the normalized context straight to the sigmoid.
    """

    kind = "lct"

    def __init__(self, registry: ParamRegistry, name: str, cfg: AttentionConfig,
                 dtype=np.float32):
        super().__init__()
        cfg.validate()
        if cfg.kind != "lct":
            raise ValueError(f"LCTBlock got config kind {cfg.kind!r}")
        self.cfg = cfg
        self.g_eff = cfg.effective_groups()
        # test scaffolding: replace the gate with exactly 1 (backward then
        # sees a saturated sigmoid, so no gradient enters w, b, or z)
        self.force_unit_gate = False
        c = cfg.channels
        w0 = 1.0 if cfg.init_mode == "w1_b0" else 0.0
        b0 = 1.0 if cfg.init_mode == "w0_b1" else 0.0
        self.w = registry.add_param(name + ".w", np.full(c, w0, dtype=dtype))
        self.b = registry.add_param(name + ".b", np.full(c, b0, dtype=dtype))

    def forward(self, x, train=True):
        cfg = self.cfg
        z = aggregate(x)
        if cfg.skip_normalize:
            zhat, inv = z, None
        else:
            zhat, inv = normalize_with_cache(z, self.g_eff, cfg.epsilon)
        a = zhat if cfg.skip_transform else transform(zhat, self.w.data, self.b.data)
        s = sigmoid(a)
        if self.force_unit_gate:
            s = np.ones_like(s)
        y = x * s[:, :, None, None]
        self._record(z, s)
        self._cache = (x, zhat, inv, s)
        return y

    def backward(self, dy):
        x, zhat, inv, s = self._take_cache()
        dx = dy * s[:, :, None, None]
        dgate = (dy * x).sum(axis=(2, 3))
        da = dgate * s * (1.0 - s)
        if self.cfg.skip_transform:
            dzhat = da
        else:
            self.w.accumulate((da * zhat).sum(axis=0))
            self.b.accumulate(da.sum(axis=0))
            dzhat = da * self.w.data
        if self.cfg.skip_normalize:
            dz = dzhat
        else:
            dz = normalize_backward(dzhat, zhat, inv, self.g_eff)
        dx += aggregate_backward(dz, x.shape)
        return dx


class SEBlock(AttentionBlock):
    """Gate channels through a bottleneck MLP on the raw global context."""

    kind = "se"

    def __init__(self, registry: ParamRegistry, name: str, cfg: AttentionConfig,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        cfg.validate()
        if cfg.kind not in ("se", "se_plus"):
            raise ValueError(f"SEBlock got config kind {cfg.kind!r}")
        self.cfg = cfg
        c, r = cfg.channels, cfg.reduction
        self.fc1 = Linear(registry, name + ".fc1", c, c // r, rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.fc2 = Linear(registry, name + ".fc2", c // r, c, rng=rng, dtype=dtype)

    def _excite(self, v: np.ndarray, train: bool) -> np.ndarray:
        return self.fc2.forward(self.relu.forward(self.fc1.forward(v, train), train), train)

    def _excite_backward(self, da: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.relu.backward(self.fc2.backward(da)))

    def forward(self, x, train=True):
        z = aggregate(x)
        a = self._excite(z, train)
        s = sigmoid(a)
        y = x * s[:, :, None, None]
        self._record(z, s)
        self._cache = (x, s)
        return y

    def backward(self, dy):
        x, s = self._take_cache()
        dx = dy * s[:, :, None, None]
        dgate = (dy * x).sum(axis=(2, 3))
        da = dgate * s * (1.0 - s)
        dz = self._excite_backward(da)
        dx += aggregate_backward(dz, x.shape)
        return dx


class SEPlusBlock(SEBlock):
    """SE with the group standardization inserted before the bottleneck."""

    kind = "se_plus"

    def __init__(self, registry: ParamRegistry, name: str, cfg: AttentionConfig,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__(registry, name, cfg, rng=rng, dtype=dtype)
        self.g_eff = cfg.effective_groups()

    def forward(self, x, train=True):
        z = aggregate(x)
        zhat, inv = normalize_with_cache(z, self.g_eff, self.cfg.epsilon)
        a = self._excite(zhat, train)
        s = sigmoid(a)
        y = x * s[:, :, None, None]
        self._record(z, s)
        self._cache = (x, zhat, inv, s)
        return y

    def backward(self, dy):
        x, zhat, inv, s = self._take_cache()
        dx = dy * s[:, :, None, None]
        dgate = (dy * x).sum(axis=(2, 3))
        da = dgate * s * (1.0 - s)
        dzhat = self._excite_backward(da)
        dz = normalize_backward(dzhat, zhat, inv, self.g_eff)
        dx += aggregate_backward(dz, x.shape)
        return dx


def make_block(registry: ParamRegistry, name: str, cfg: AttentionConfig,
               rng: Rng | None = None, dtype=np.float32) -> AttentionBlock:
    cfg.validate()
    if cfg.kind == "none":
        return NoneBlock()
    if cfg.kind == "lct":
        return LCTBlock(registry, name, cfg, dtype=dtype)
    if cfg.kind == "se":
        return SEBlock(registry, name, cfg, rng=rng, dtype=dtype)
    return SEPlusBlock(registry, name, cfg, rng=rng, dtype=dtype)
