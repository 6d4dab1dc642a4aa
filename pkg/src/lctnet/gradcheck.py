"""Finite-difference verification of every backward pass.

Each unit builds a small 64-bit instance, computes analytic gradients for a
scalar loss (sum of output times a fixed random weighting, or cross-entropy
for the end-to-end unit), and compares against central differences with
h = 1e-5.  Errors are relative with the denominator floored at 1e-2 so that
near-zero coordinates are judged on an absolute scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from .attention import AttentionConfig
from .backbone import NetworkSpec, StageSpec, build
from .layers import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Linear,
                     ParamRegistry, ReLU, Sigmoid, softmax_cross_entropy)
from .rng import Rng
from .tensor import conv2d, conv2d_backward

H_STEP = 1e-5
TOLERANCE = 1e-4
ERR_FLOOR = 1e-2


@dataclass
class UnitResult:
    name: str
    max_err: float
    worst: str  # description of the worst coordinate

    @property
    def ok(self) -> bool:
        return self.max_err < TOLERANCE


def _fd(loss_fn, arr: np.ndarray, coords=None, h: float = H_STEP) -> np.ndarray:
    """Central-difference gradient of loss_fn w.r.t. arr (mutated in place)."""
    g = np.zeros_like(arr)
    for idx in (coords if coords is not None else np.ndindex(arr.shape)):
        old = arr[idx]
        arr[idx] = old + h
        lp = loss_fn()
        arr[idx] = old - h
        lm = loss_fn()
        arr[idx] = old
        g[idx] = (lp - lm) / (2.0 * h)
    return g


def _worst(label: str, analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, str]:
    err = np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), ERR_FLOOR)
    idx = np.unravel_index(int(np.argmax(err)), err.shape)
    return float(err[idx]), f"{label}{[int(i) for i in idx]}"


def _combine(name: str, parts: list[tuple[float, str]]) -> UnitResult:
    err, worst = max(parts, key=lambda t: t[0])
    return UnitResult(name, err, worst)


def _check_layer(name: str, layer, x: np.ndarray, params: dict) -> UnitResult:
    """Weighted-sum loss check of one layer w.r.t. its input and parameters."""
    r = Rng(101).normal(layer.forward(x, train=True).shape)

    def loss():
        return float((layer.forward(x, train=True) * r).sum())

    for p in params.values():
        p.grad = None
    layer.forward(x, train=True)
    dx = layer.backward(r)
    parts = [_worst("x", dx, _fd(loss, x))]
    for label, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(_worst(label, analytic, _fd(loss, p.data)))
    return _combine(name, parts)


def _unit_conv(name: str, n, c_in, c_out, k, stride, hw) -> UnitResult:
    rng = Rng(7)
    x = rng.normal((n, c_in, hw, hw))
    kern = rng.normal((c_out, c_in, k, k), sigma=0.5)
    pad = k // 2
    r = rng.normal(conv2d(x, kern, stride, pad).shape)

    def loss():
        return float((conv2d(x, kern, stride, pad) * r).sum())

    dx, dk = conv2d_backward(r, x, kern, stride, pad)
    return _combine(name, [_worst("x", dx, _fd(loss, x)),
                           _worst("k", dk, _fd(loss, kern))])


def _unit_batchnorm() -> UnitResult:
    rng = Rng(11)
    reg = ParamRegistry()
    bn = BatchNorm2d(reg, "bn", 3, dtype=np.float64)
    bn.gamma.data[:] = rng.normal((3,), 1.0, 0.3)
    bn.beta.data[:] = rng.normal((3,), 0.0, 0.3)
    x = rng.normal((4, 3, 5, 5), 0.5, 2.0)
    return _check_layer("batchnorm", bn, x,
                        {"gamma": bn.gamma, "beta": bn.beta})


def _unit_linear() -> UnitResult:
    rng = Rng(13)
    reg = ParamRegistry()
    fc = Linear(reg, "fc", 7, 4, rng=rng, dtype=np.float64)
    x = rng.normal((5, 7))
    return _check_layer("linear", fc, x, {"w": fc.weight, "b": fc.bias})


def _unit_relu() -> UnitResult:
    rng = Rng(17)
    x = rng.normal((4, 6))
    x += np.where(x >= 0, 0.2, -0.2)  # keep clear of the kink
    return _check_layer("relu", ReLU(), x, {})


def _unit_sigmoid() -> UnitResult:
    rng = Rng(19)
    return _check_layer("sigmoid", Sigmoid(), rng.normal((4, 6)), {})


def _unit_gap() -> UnitResult:
    rng = Rng(23)
    return _check_layer("global_avg_pool", GlobalAvgPool(), rng.normal((2, 5, 4, 4)), {})


def _unit_avgpool() -> UnitResult:
    rng = Rng(29)
    return _check_layer("avg_pool", AvgPool2d(3, 2, 1), rng.normal((2, 3, 7, 7)), {})


def _unit_softmax_ce() -> UnitResult:
    rng = Rng(31)
    logits = rng.normal((6, 5))
    labels = rng.integers(0, 5, (6,))

    def loss():
        return softmax_cross_entropy(logits, labels)[0]

    _, dlogits = softmax_cross_entropy(logits, labels)
    return _combine("softmax_cross_entropy",
                    [_worst("logits", dlogits, _fd(loss, logits))])


def _unit_aggregate() -> UnitResult:
    rng = Rng(37)
    x = rng.normal((2, 6, 4, 4))
    r = rng.normal((2, 6))

    def loss():
        return float((att.aggregate(x) * r).sum())

    dx = att.aggregate_backward(r, x.shape)
    return _combine("aggregate", [_worst("x", dx, _fd(loss, x))])


def _unit_normalize() -> UnitResult:
    rng = Rng(41)
    z = rng.normal((3, 8), 0.0, 2.0)
    r = rng.normal((3, 8))
    g_eff, eps = 4, 1e-5

    def loss():
        return float((att.normalize(z, g_eff, eps) * r).sum())

    zhat, inv = att.normalize_with_cache(z, g_eff, eps)
    dz = att.normalize_backward(r, zhat, inv, g_eff)
    return _combine("normalize", [_worst("z", dz, _fd(loss, z))])


def _unit_transform() -> UnitResult:
    rng = Rng(43)
    z = rng.normal((3, 6))
    w = rng.normal((6,))
    b = rng.normal((6,))
    r = rng.normal((3, 6))

    def loss():
        return float((att.transform(z, w, b) * r).sum())

    parts = [_worst("z", r * w, _fd(loss, z)),
             _worst("w", (r * z).sum(axis=0), _fd(loss, w)),
             _worst("b", r.sum(axis=0), _fd(loss, b))]
    return _combine("transform", parts)


def _unit_fuse() -> UnitResult:
    rng = Rng(47)
    x = rng.normal((2, 4, 3, 3))
    a = rng.normal((2, 4))
    r = rng.normal(x.shape)

    def loss():
        return float((att.fuse(x, a) * r).sum())

    from .tensor import sigmoid
    s = sigmoid(a)
    dx = r * s[:, :, None, None]
    da = (r * x).sum(axis=(2, 3)) * s * (1.0 - s)
    return _combine("fuse", [_worst("x", dx, _fd(loss, x)),
                             _worst("a", da, _fd(loss, a))])


def _block_unit(name: str, cfg: AttentionConfig, seed: int) -> UnitResult:
    rng = Rng(seed)
    reg = ParamRegistry()
    block = att.make_block(reg, "attn", cfg, rng=rng, dtype=np.float64)
    params = {}
    for pname, p in reg.named_params():
        p.data[:] = rng.normal(p.data.shape, 0.0, 0.8)
        params[pname.removeprefix("attn.")] = p
    x = rng.normal((2, cfg.channels, 4, 4), 0.3, 1.5)
    return _check_layer(name, block, x, params)


def _unit_end2end() -> UnitResult:
    rng = Rng(53)
    spec = NetworkSpec(
        stem=(8, 3, 1),
        stages=[StageSpec(1, 8, "basic", 1), StageSpec(1, 12, "basic", 2)],
        attention=AttentionConfig(kind="lct", groups=4),
        num_classes=4,
        input_geometry=(3, 8, 8),
    )
    net = build(spec, rng, dtype=np.float64)
    x = rng.normal((3, 3, 8, 8))
    labels = rng.integers(0, 4, (3,))

    def loss():
        return softmax_cross_entropy(net.forward(x, train=True), labels)[0]

    net.registry.zero_grad()
    _, dlogits = softmax_cross_entropy(net.forward(x, train=True), labels)
    net.backward(dlogits)
    coord_rng = Rng(59)
    parts = []
    all_params = net.registry.params()
    for _ in range(20):
        p = all_params[int(coord_rng.integers(0, len(all_params)))]
        flat = int(coord_rng.integers(0, p.size))
        idx = np.unravel_index(flat, p.data.shape)
        numeric = _fd(loss, p.data, coords=[idx])[idx]
        err, _ = _worst(p.name, np.array([p.grad[idx]]), np.array([numeric]))
        parts.append((err, f"{p.name}{[int(i) for i in idx]}"))
    return _combine("end2end_micro_net", parts)


LAYER_UNITS = (
    ("conv3x3", lambda: _unit_conv("conv3x3", 2, 3, 4, 3, 1, 6)),
    ("conv3x3_stride2", lambda: _unit_conv("conv3x3_stride2", 2, 3, 4, 3, 2, 7)),
    ("conv1x1", lambda: _unit_conv("conv1x1", 2, 4, 3, 1, 1, 5)),
    ("batchnorm", _unit_batchnorm),
    ("linear", _unit_linear),
    ("relu", _unit_relu),
    ("sigmoid", _unit_sigmoid),
    ("global_avg_pool", _unit_gap),
    ("avg_pool", _unit_avgpool),
    ("softmax_cross_entropy", _unit_softmax_ce),
)

BLOCK_UNITS = (
    ("aggregate", _unit_aggregate),
    ("normalize", _unit_normalize),
    ("transform", _unit_transform),
    ("fuse", _unit_fuse),
    ("se", lambda: _block_unit("se", AttentionConfig("se", 8, reduction=2), 61)),
    ("se_plus", lambda: _block_unit(
        "se_plus", AttentionConfig("se_plus", 8, reduction=2, groups=4), 67)),
    ("lct", lambda: _block_unit("lct", AttentionConfig("lct", 8, groups=4), 71)),
    ("lct_skip_normalize", lambda: _block_unit(
        "lct_skip_normalize", AttentionConfig("lct", 8, groups=4, skip_normalize=True), 73)),
    ("lct_skip_transform", lambda: _block_unit(
        "lct_skip_transform", AttentionConfig("lct", 8, groups=4, skip_transform=True), 79)),
    ("lct_skip_both", lambda: _block_unit(
        "lct_skip_both", AttentionConfig("lct", 8, groups=4, skip_normalize=True,
                                         skip_transform=True), 83)),
)

END2END_UNITS = (("end2end_micro_net", _unit_end2end),)

SCOPES = {
    "layers": LAYER_UNITS,
    "blocks": BLOCK_UNITS,
    "end2end": END2END_UNITS,
    "all": LAYER_UNITS + BLOCK_UNITS + END2END_UNITS,
}


def run_scope(scope: str) -> list[UnitResult]:
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {sorted(SCOPES)}")
    return [fn() for _, fn in SCOPES[scope]]
