"""Dense tensor container and the numeric kernels everything else computes on.

Values are contiguous row-major numpy arrays in one of two widths: float64
for gradient checking and oracle comparisons, float32 for training
throughput.  All kernels use a fixed reduction order (plain numpy reductions
over contiguous data), so repeated runs on the same machine are
bit-identical.
"""

from __future__ import annotations

import numpy as np

FLOAT_WIDTHS = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class GeometryError(ValueError):
    """A spatial operation would produce an empty or negative extent."""


class Tensor:
    """A contiguous real-valued array plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_WIDTHS:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _broadcastable_trailing(target: tuple[int, ...], shape: tuple[int, ...]) -> bool:
    """True when `shape`, right-aligned against `target`, matches or is 1."""
    if len(shape) > len(target):
        return False
    for t, s in zip(reversed(target), reversed(shape)):
        if s != t and s != 1:
            return False
    return True


_EW_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}


def elementwise(kind: str, a, b) -> np.ndarray:
    """Binary elementwise op; `b` may be a scalar or trailing-broadcastable."""
    if kind not in _EW_OPS:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(_EW_OPS)}")
    a = _as_array(a)
    b_arr = _as_array(b)
    if b_arr.ndim > 0 and a.shape != b_arr.shape:
        if not _broadcastable_trailing(a.shape, b_arr.shape):
            raise ShapeError(
                f"elementwise {kind}: shape {a.shape} is not compatible with {b_arr.shape}"
            )
    return _EW_OPS[kind](a, b_arr)


def matvec(w, x, bias=None) -> np.ndarray:
    """w @ x + bias for a single vector x."""
    w, x = _as_array(w), _as_array(x)
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} and {x.shape}")
    out = w @ x
    if bias is not None:
        bias = _as_array(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"matvec: bias shape {bias.shape} does not match output ({w.shape[0]},)")
        out = out + bias
    return out


def reduce_mean(a, axes) -> np.ndarray:
    """Arithmetic mean over the given axes (must be distinct and in range)."""
    a = _as_array(a)
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce_mean: repeated axes {axes}")
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ValueError(f"reduce_mean: axis {ax} out of range for rank {a.ndim}")
        if a.shape[ax] == 0:
            raise ValueError(f"reduce_mean: empty reduction over axis {ax} of shape {a.shape}")
    return a.mean(axis=axes)


def _span(offset: int, stride: int, extent: int) -> slice:
    # rows `offset + i*stride` for i in range(extent)
    return slice(offset, offset + (extent - 1) * stride + 1, stride)


def conv2d_shape(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise GeometryError(
            f"conv2d: output {ho}x{wo} is empty for input {h}x{w}, kernel {k}, "
            f"stride {stride}, pad {pad}"
        )
    return ho, wo


def conv2d(x, kernel, stride: int = 1, pad: int | None = None) -> np.ndarray:
    """Direct cross-correlation of NCHW input with OIkk kernel.

    Computed as a sum over kernel taps of a channel contraction on the
    correspondingly shifted input window, which keeps the arithmetic order
    fixed (taps outermost, contraction inner).
    """
    x, kernel = _as_array(x), _as_array(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 operands, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kin, kh, kw = kernel.shape
    if kin != cin:
        raise ShapeError(f"conv2d: input channels {cin} do not match kernel {kernel.shape}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kernel.shape}")
    if pad is None:
        pad = kh // 2
    ho, wo = conv2d_shape(h, w, kh, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            xs = xp[:, :, _span(u, stride, ho), _span(v, stride, wo)]
            y += np.tensordot(xs, kernel[:, :, u, v], axes=([1], [1]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(dy, x, kernel, stride: int = 1, pad: int | None = None):
    """Gradients of conv2d w.r.t. input and kernel, mirroring the forward taps."""
    dy, x, kernel = _as_array(dy), _as_array(x), _as_array(kernel)
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    if pad is None:
        pad = kh // 2
    ho, wo = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    for u in range(kh):
        for v in range(kw):
            rows, cols = _span(u, stride, ho), _span(v, stride, wo)
            xs = xp[:, :, rows, cols]
            dk[:, :, u, v] = np.tensordot(dy, xs, axes=([0, 2, 3], [0, 2, 3]))
            dxs = np.tensordot(dy, kernel[:, :, u, v], axes=([1], [0]))
            dxp[:, :, rows, cols] += dxs.transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return np.ascontiguousarray(dx), dk


def sigmoid(x) -> np.ndarray:
    """Numerically safe logistic function."""
    x = _as_array(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def assert_finite(a, what: str = "value") -> np.ndarray:
    a = _as_array(a)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite {what} encountered")
    return a
