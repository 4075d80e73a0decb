"""Reverse-mode automatic differentiation over dense numpy tensors.

A small closed op vocabulary (matmul, add, mul, reshape/transpose, concat,
narrow, softmax, layer_norm, gelu, sigmoid, log, relu, mean/sum) is enough
for the encoder and the training losses. Every op records a backward rule on
a tape; `backward` walks the tape once in reverse topological order.

All data is float64. The relu/hinge subgradient at the kink is 0.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus the tape bookkeeping for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[Tensor], None] | None = None
        self._parents = parents
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return scale(self, 1.0 / float(c))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _node(data, parents: Sequence[Tensor], backward: Callable[[Tensor], None]) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(data)
    if _needs_grad(*parents):
        out._parents = parents
        # stored unbound (called as node._backward(node)) so the node never
        # references itself; cycle-free graphs are freed by refcounting alone
        out._backward = backward
    return out


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(out):
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))
    return _node(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    def bwd(out):
        if a is b:
            # single accumulation keeps backward linear to the last ulp
            a._accumulate(_unbroadcast(2.0 * out.grad * a.data, a.shape))
            return
        a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def bwd(out):
        a._accumulate(out.grad * c)
    return _node(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    def bwd(out):
        g = out.grad
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _node(a.data @ b.data, (a, b), bwd)


# ------------------------------------------------------------------- shaping

def reshape(a: Tensor, shape: tuple) -> Tensor:
    def bwd(out):
        a._accumulate(out.grad.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    def bwd(out):
        a._accumulate(out.grad.transpose(inv))
    return _node(a.data.transpose(axes), (a,), bwd)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    def bwd(out):
        a._accumulate(_unbroadcast(out.grad, a.shape))
    return _node(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bwd(out):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(start, stop)
            t._accumulate(out.grad[tuple(idx)])
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    def bwd(out):
        g = np.zeros_like(a.data)
        g[idx] = out.grad
        a._accumulate(g)
    return _node(a.data[idx].copy(), (a,), bwd)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not cover axis of length {a.shape[axis]}")
    pieces, start = [], 0
    for s in sizes:
        pieces.append(narrow(a, axis, start, s))
        start += s
    return pieces


# -------------------------------------------------------------- nonlinearity

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    def bwd(out):
        a._accumulate(out.grad * mask)
    return _node(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    def bwd(out):
        a._accumulate(out.grad * y * (1.0 - y))
    return _node(y, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    def bwd(out):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate(out.grad * (cdf + x * pdf))
    return _node(x * cdf, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(out):
        a._accumulate(out.grad / a.data)
    return _node(np.log(a.data), (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def bwd(out):
        dot = (out.grad * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (out.grad - dot))
    return _node(y, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 0.0) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.maximum(var + eps, 1e-30))
    xhat = (x - mu) * inv
    def bwd(out):
        go = out.grad * gain.data
        gain._accumulate(_unbroadcast(out.grad * xhat, gain.shape))
        bias._accumulate(_unbroadcast(out.grad, bias.shape))
        s1 = go.sum(axis=-1, keepdims=True)
        s2 = (go * xhat).sum(axis=-1, keepdims=True)
        a._accumulate(inv / n * (n * go - s1 - xhat * s2))
    return _node(xhat * gain.data + bias.data, (a, gain, bias), bwd)


# ---------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------------ backward

def backward(out: Tensor) -> None:
    """Propagate gradients from a scalar output to every reachable leaf."""
    if out.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {out.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    `f` rebuilds the graph from the current parameter data on every call.
    When a parameter is large, `max_entries_per_param` limits the check to a
    seeded random subset of its entries.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data)
            flat[i] = orig - step
            lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(ana.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
