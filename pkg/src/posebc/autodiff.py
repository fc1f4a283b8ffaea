"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough ops for the denoising networks: broadcasting arithmetic, matmul,
shape ops, reductions, and fused softmax / gelu / layernorm. Computation
follows the dtype of its inputs; explicit reductions accumulate in float64
before casting back, so float32 graphs keep double-precision sums.
"""
from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation graph wrapping one ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, parents=(a, b))
    out._vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, parents=(a, b))
    out._vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, parents=(a, b))
    out._vjp = lambda g: (
        _unbroadcast(g * b.data, a.shape),
        _unbroadcast(g * a.data, b.shape),
    )
    return out


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * s, parents=(a,))
    out._vjp = lambda g: (g * s,)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product supporting (..., m, k) @ (k, n) and batched operands."""
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data @ b.data, parents=(a, b))

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out._vjp = vjp
    return out


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._vjp = lambda g: (g.reshape(a.shape),)
    return out


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), parents=(a,))
    out._vjp = lambda g: (g.transpose(inverse),)
    return out


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data[idx], parents=(a,))

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    out._vjp = vjp
    return out


def stack(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors))

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    out._vjp = vjp
    return out


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i] : offsets[i + 1]], 0, axis)
            for i in range(len(tensors))
        )

    out._vjp = vjp
    return out


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = Tensor(_sum64(a.data, axis=axis, keepdims=keepdims), parents=(a,))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_ = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_, a.shape).copy(),)

    out._vjp = vjp
    return out


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(a) -> Tensor:
    """Softmax over the last axis, with max subtraction for stability."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / _sum64(e, axis=-1, keepdims=True)
    out = Tensor(y, parents=(a,))

    def vjp(g):
        dot = _sum64(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    out._vjp = vjp
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Smooth GELU (tanh approximation)."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), parents=(a,))

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        return (g * dx,)

    out._vjp = vjp
    return out


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    a = _wrap(a)
    x = a.data
    n = x.shape[-1]
    mu = _sum64(x, axis=-1, keepdims=True) / n
    xc = x - mu
    var = _sum64(xc * xc, axis=-1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, parents=(a,))

    def vjp(g):
        g_mean = _sum64(g, axis=-1, keepdims=True) / n
        gy_mean = _sum64(g * y, axis=-1, keepdims=True) / n
        return (inv * (g - g_mean - y * gy_mean),)

    out._vjp = vjp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if not parent.requires_grad:
                continue
            g = np.asarray(g, dtype=parent.data.dtype)
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad = parent.grad + g
