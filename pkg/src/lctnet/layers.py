"""Differentiable layers with hand-derived backward passes.

Every layer follows the same protocol: ``forward(x, train)`` caches whatever
the backward pass needs, ``backward(dy)`` returns dX and accumulates
parameter gradients additively.  Parameters live in a ParamRegistry under
unique dotted names; checkpoints and the cost accounting both key off those
names.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import ShapeError, conv2d, conv2d_backward, sigmoid


class ModeError(RuntimeError):
    """Layer used out of protocol (backward without a cached forward)."""


class MissingGradError(RuntimeError):
    """sgd_step ran before any backward populated a parameter's gradient."""


class Param:
    """A named trainable tensor with its gradient and momentum buffers."""

    __slots__ = ("name", "data", "grad", "vel", "decay")

    def __init__(self, name: str, data: np.ndarray, decay: bool = True):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad: np.ndarray | None = None
        self.vel: np.ndarray | None = None
        self.decay = decay

    @property
    def size(self) -> int:
        return self.data.size

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.data.shape}, decay={self.decay})"


class ParamRegistry:
    """Insertion-ordered store of parameters and non-trainable buffers.

    Buffers (BatchNorm running statistics) are plain arrays updated in place
    by their owning layer; they are checkpointed but never stepped.
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, data: np.ndarray, decay: bool = True) -> Param:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Param(name, data, decay)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.ascontiguousarray(data)
        self._buffers[name] = arr
        return arr

    def params(self) -> list[Param]:
        return list(self._params.values())

    def named_params(self) -> list[tuple[str, Param]]:
        return list(self._params.items())

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(self._buffers.items())

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, insertion order within each kind."""
        out = [(n, p.data) for n, p in self._params.items()]
        out.extend(self._buffers.items())
        return out

    def get(self, name: str) -> Param:
        return self._params[name]

    def load_tensor(self, name: str, value: np.ndarray) -> None:
        """Assign into the existing storage so layer references stay live."""
        if name in self._params:
            dst = self._params[name].data
        elif name in self._buffers:
            dst = self._buffers[name]
        else:
            raise KeyError(f"unknown tensor name {name!r}")
        if dst.shape != value.shape:
            raise ShapeError(f"tensor {name!r}: stored shape {dst.shape} != loaded {value.shape}")
        dst[...] = value

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.fill(0.0)

    def total_size(self) -> int:
        return sum(p.size for p in self._params.values())


def sgd_step(registry: ParamRegistry, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Momentum SGD: v <- momentum*v + (g + wd*p); p <- p - lr*v; grads zeroed.

    Weight decay is added to the gradient only for decay-eligible parameters.
    """
    for p in registry.params():
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name!r} has no gradient")
        g = p.grad
        if weight_decay != 0.0 and p.decay:
            g = g + weight_decay * p.data
        if p.vel is None:
            p.vel = np.zeros_like(p.data)
        p.vel *= momentum
        p.vel += g.astype(p.data.dtype, copy=False)
        p.data -= lr * p.vel
        p.grad.fill(0.0)


class Layer:
    """Base protocol; subclasses set self._cache in forward."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise ModeError(f"{type(self).__name__}.backward called without a cached forward")
        cache, self._cache = self._cache, None
        return cache

    def __call__(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        return self.forward(x, train)


class Conv2d(Layer):
    """k x k cross-correlation, no bias (a BatchNorm follows in the backbone).

    Weights start from a zero-mean normal with std sqrt(2 / (k*k*c_in)).
    """

    def __init__(self, registry: ParamRegistry, name: str, c_in: int, c_out: int,
                 k: int, stride: int = 1, pad: int | None = None,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        std = float(np.sqrt(2.0 / (k * k * c_in)))
        if rng is None:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = rng.normal((c_out, c_in, k, k), sigma=std, dtype=dtype)
        self.weight = registry.add_param(name + ".weight", w)

    def forward(self, x, train=True):
        y = conv2d(x, self.weight.data, self.stride, self.pad)
        self._cache = x
        return y

    def backward(self, dy):
        x = self._take_cache()
        dx, dk = conv2d_backward(dy, x, self.weight.data, self.stride, self.pad)
        self.weight.accumulate(dk)
        return dx


class BatchNorm2d(Layer):
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes by biased batch statistics and nudges the running
    statistics toward them with factor 0.1; inference mode applies the frozen
    affine.  Running stats start at (mean 0, var 1) so a freshly built network
    is usable in inference mode.
    """

    STAT_MOMENTUM = 0.1

    def __init__(self, registry: ParamRegistry, name: str, c: int,
                 eps: float = 1e-5, dtype=np.float32, decay: bool = True):
        super().__init__()
        self.c = c
        self.eps = eps
        self.gamma = registry.add_param(name + ".gamma", np.ones(c, dtype=dtype), decay=decay)
        self.beta = registry.add_param(name + ".beta", np.zeros(c, dtype=dtype), decay=decay)
        self.running_mean = registry.add_buffer(name + ".running_mean", np.zeros(c, dtype=dtype))
        self.running_var = registry.add_buffer(name + ".running_var", np.ones(c, dtype=dtype))

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.c:
            raise ShapeError(f"batchnorm: expected N x {self.c} x H x W, got {x.shape}")
        g = self.gamma.data.reshape(1, -1, 1, 1)
        b = self.beta.data.reshape(1, -1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = ((x - mean.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
            m = self.STAT_MOMENTUM
            self.running_mean *= 1.0 - m
            self.running_mean += (m * mean).astype(self.running_mean.dtype, copy=False)
            self.running_var *= 1.0 - m
            self.running_var += (m * var).astype(self.running_var.dtype, copy=False)
            self._cache = (xhat, inv, True)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
            self._cache = (xhat, inv, False)
        return g * xhat + b

    def backward(self, dy):
        xhat, inv, trained = self._take_cache()
        self.beta.accumulate(dy.sum(axis=(0, 2, 3)))
        self.gamma.accumulate((dy * xhat).sum(axis=(0, 2, 3)))
        dxhat = dy * self.gamma.data.reshape(1, -1, 1, 1)
        if not trained:
            return dxhat * inv.reshape(1, -1, 1, 1)
        n, _, h, w = dy.shape
        m = n * h * w
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv.reshape(1, -1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train=True):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class Sigmoid(Layer):
    def forward(self, x, train=True):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * y * (1.0 - y)


class Linear(Layer):
    """Fully connected layer y = x W^T + b on (N, in) batches."""

    def __init__(self, registry: ParamRegistry, name: str, n_in: int, n_out: int,
                 rng: Rng | None = None, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        std = float(np.sqrt(2.0 / n_in))
        if rng is None:
            w = np.zeros((n_out, n_in), dtype=dtype)
        else:
            w = rng.normal((n_out, n_in), sigma=std, dtype=dtype)
        self.weight = registry.add_param(name + ".weight", w)
        self.bias = registry.add_param(name + ".bias", np.zeros(n_out, dtype=dtype)) if bias else None

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"linear: expected N x {self.n_in}, got {x.shape}")
        y = x @ self.weight.data.T
        if self.bias is not None:
            y = y + self.bias.data
        self._cache = x
        return y

    def backward(self, dy):
        x = self._take_cache()
        self.weight.accumulate(dy.T @ x)
        if self.bias is not None:
            self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.data


class GlobalAvgPool(Layer):
    """N x C x H x W -> N x C spatial mean."""

    def forward(self, x, train=True):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._take_cache()
        return np.broadcast_to(dy.reshape(n, c, 1, 1) / (h * w), (n, c, h, w)).copy()


class AvgPool2d(Layer):
    """Non-overlapping-capable average pooling window (used by large stems)."""

    def __init__(self, k: int, stride: int, pad: int = 0):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        y = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for u in range(k):
            for v in range(k):
                y += xp[:, :, u:u + (ho - 1) * s + 1:s, v:v + (wo - 1) * s + 1:s]
        y /= k * k
        self._cache = (x.shape, ho, wo)
        return y

    def backward(self, dy):
        (n, c, h, w), ho, wo = self._take_cache()
        k, s, p = self.k, self.stride, self.pad
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        g = dy / (k * k)
        for u in range(k):
            for v in range(k):
                dxp[:, :, u:u + (ho - 1) * s + 1:s, v:v + (wo - 1) * s + 1:s] += g
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(z)
    loss = -float(log_probs[np.arange(n), labels].mean())
    dlogits = exp / z
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)
