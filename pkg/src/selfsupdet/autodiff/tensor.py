"""Reverse-mode automatic differentiation on dense numpy buffers.

Graph edges live on the tensors themselves: every operation records its
parent tensors and a closure that pushes gradients backward. ``backward()``
materializes the tape (a topological ordering of the recorded nodes) and
walks it exactly once in reverse. Graphs are built per training step and
discarded afterwards; calling ``backward`` twice on the same graph
accumulates gradients twice, so callers zero grads between steps.

Training runs in float32. For verification (finite-difference checks) the
same graph code runs in float64 by constructing the leaf tensors with
``dtype=np.float64``; every op preserves the dtype of its inputs.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (frozen forward passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype == np.float64:
        return arr
    if arr.dtype != DEFAULT_DTYPE:
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=()):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = _parents

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    # -- graph bookkeeping ---------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Value-identical tensor that contributes zero gradient upstream."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"backward on non-finite loss value {float(self.data)}")
        # iterative topological sort; recursion depth is unbounded for long chains
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- op helpers ------------------------------------------------------------

    @staticmethod
    def _lift(x, dtype):
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=dtype))

    def _make(self, data, parents, backward):
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else ())
        if needs:
            out._backward = backward
        return out

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other, self.dtype)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        return self._make(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            if self.requires_grad:
                self._accumulate(-g)

        return self._make(-self.data, (self,), bw)

    def __sub__(self, other):
        other = Tensor._lift(other, self.dtype)
        out_data = self.data - other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))

        return self._make(out_data, (self, other), bw)

    def __rsub__(self, other):
        return Tensor._lift(other, self.dtype) - self

    def __mul__(self, other):
        other = Tensor._lift(other, self.dtype)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return self._make(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other, self.dtype)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))

        return self._make(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return Tensor._lift(other, self.dtype) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("pow supports scalar exponents only")
        out_data = self.data ** exponent

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))

        return self._make(out_data, (self,), bw)

    def square(self):
        def bw(g):
            if self.requires_grad:
                self._accumulate(g * 2.0 * self.data)

        return self._make(self.data * self.data, (self,), bw)

    def abs(self):
        def bw(g):
            if self.requires_grad:
                self._accumulate(g * np.sign(self.data))

        return self._make(np.abs(self.data), (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / np.maximum(out_data, 1e-30))

        return self._make(out_data, (self,), bw)

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * out_data)

        return self._make(out_data, (self,), bw)

    def log(self):
        def bw(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        return self._make(np.log(self.data), (self,), bw)

    # -- activations ----------------------------------------------------------

    def tanh(self):
        out_data = np.tanh(self.data)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - out_data * out_data))

        return self._make(out_data, (self,), bw)

    def sigmoid(self):
        out_data = np.where(self.data >= 0,
                            1.0 / (1.0 + np.exp(-np.abs(self.data))),
                            np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))))
        out_data = out_data.astype(self.dtype, copy=False)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * out_data * (1.0 - out_data))

        return self._make(out_data, (self,), bw)

    def relu(self):
        mask = self.data > 0

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return self._make(self.data * mask, (self,), bw)

    def leaky_relu(self, alpha=0.1):
        scale = np.where(self.data > 0, 1.0, alpha).astype(self.dtype)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * scale)

        return self._make(self.data * scale, (self,), bw)

    def clip(self, lo, hi):
        """Clamp values to [lo, hi]; gradient is zero outside the interval."""
        inside = ((self.data >= lo) & (self.data <= hi)).astype(self.dtype)

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * inside)

        return self._make(np.clip(self.data, lo, hi), (self,), bw)

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if not self.requires_grad:
                return
            grad = g
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                for ax in sorted(a % self.data.ndim for a in axes):
                    grad = np.expand_dims(grad, axis=ax)
            self._accumulate(np.broadcast_to(grad, self.data.shape).copy())

        return self._make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            denom = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            denom = 1
            for ax in axes:
                denom *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(denom))

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.data.shape

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old_shape))

        return self._make(self.data.reshape(shape), (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv))

        return self._make(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bw(g):
            if self.requires_grad:
                grad = np.zeros_like(self.data)
                grad[key] = g
                self._accumulate(grad)

        return self._make(out_data, (self,), bw)

    # -- linear algebra -----------------------------------------------------------

    def matmul(self, other):
        other = Tensor._lift(other, self.dtype)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got {self.data.shape} @ {other.data.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise ValueError(
                f"matmul shape mismatch: {self.data.shape} @ {other.data.shape}")
        out_data = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        return self._make(out_data, (self, other), bw)

    __matmul__ = matmul

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            if self.requires_grad:
                dot = (g * out_data).sum(axis=axis, keepdims=True)
                self._accumulate((g - dot) * out_data)

        return self._make(out_data, (self,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; backward contributes zero to ``x``."""
    return x.detach()


def concat(tensors, axis=0):
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    needs = _grad_enabled and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs,
                 _parents=tuple(tensors) if needs else ())
    if needs:
        def bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(idx)])

        out._backward = bw
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)
