"""Reverse-mode autodiff over dense numpy buffers.

Tensors default to 32-bit storage; gradient checking switches the module to
64-bit via using_dtype. Backward passes are single-threaded and deterministic:
the same graph and seed produce bit-identical gradients.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(Exception):
    """Operand shapes do not compose."""


_default_dtype = np.float32


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype):
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ValueError("supported dtypes: float32, float64")
    _default_dtype = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (64-bit mode for grad checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Dense n-dimensional value with optional reverse-mode gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad or any(
            p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if self.data.size != 1:
            raise ShapeError("backward() expects a scalar loss")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        self._accumulate(np.ones_like(self.data))
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    def zero_grad(self):
        self.grad = None

    # ---- elementwise arithmetic ----

    def __add__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))
        out._backward = bwd if out.requires_grad else None
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))
        out._backward = bwd if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.data.shape[-1] != other.data.shape[-2 if other.ndim > 1 else 0]:
            raise ShapeError(f"matmul {self.shape} @ {other.shape}")
        out = Tensor(self.data @ other.data, parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))
        out._backward = bwd if out.requires_grad else None
        return out

    # ---- shape ops ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        out = Tensor(self.data.reshape(shape), parents=(self,))

        def bwd(g):
            self._accumulate(g.reshape(src))
        out._backward = bwd if out.requires_grad else None
        return out

    def transpose(self, axes):
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), parents=(self,))

        def bwd(g):
            self._accumulate(g.transpose(inv))
        out._backward = bwd if out.requires_grad else None
        return out

    def __getitem__(self, key):
        out = Tensor(self.data[key], parents=(self,))

        def bwd(g):
            full = np.zeros_like(self.data)
            full[key] = g
            self._accumulate(full)
        out._backward = bwd if out.requires_grad else None
        return out

    # ---- reductions ----

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     parents=(self,))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())
        out._backward = bwd if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ---- nonlinearities ----

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), parents=(self,))

        def bwd(g):
            self._accumulate(g * (self.data > 0.0))
        out._backward = bwd if out.requires_grad else None
        return out

    def sigmoid(self):
        # exp only of -|x| so large magnitudes never overflow
        z = np.exp(-np.abs(self.data))
        s = np.where(self.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
        out = Tensor(s, parents=(self,))

        def bwd(g):
            self._accumulate(g * s * (1.0 - s))
        out._backward = bwd if out.requires_grad else None
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))

        def bwd(g):
            self._accumulate(g / self.data)
        out._backward = bwd if out.requires_grad else None
        return out

    def reciprocal(self):
        r = 1.0 / self.data
        out = Tensor(r, parents=(self,))

        def bwd(g):
            self._accumulate(-g * r * r)
        out._backward = bwd if out.requires_grad else None
        return out

    def clamp(self, lo: float, hi: float):
        """Clip values; gradient is passed through only where not clipped."""
        clipped = np.clip(self.data, lo, hi)
        inside = (self.data > lo) & (self.data < hi)
        out = Tensor(clipped, parents=(self,))

        def bwd(g):
            self._accumulate(g * inside)
        out._backward = bwd if out.requires_grad else None
        return out

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(p, parents=(self,))

        def bwd(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            self._accumulate(p * (g - dot))
        out._backward = bwd if out.requires_grad else None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.grad is not None})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def concat(tensors, axis=0) -> Tensor:
    """Concatenate along an axis; gradient splits back to the operands."""
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(a, b)
                t._accumulate(g[tuple(idx)])
    out._backward = bwd if out.requires_grad else None
    return out


def parameter(data, rng: np.random.Generator | None = None,
              scale: float | None = None) -> Tensor:
    """Learnable tensor; with rng, data is a shape to fill uniformly."""
    if rng is not None:
        shape = tuple(data)
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = scale if scale is not None else 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.uniform(-bound, bound, size=shape)
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)
