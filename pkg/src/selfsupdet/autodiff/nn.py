"""Parameter containers for the small conv nets used by the pipeline."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Minimal parameter registry; supports nesting and named traversal."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._modules: dict[str, Module] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        self._params[name] = t
        return t

    def add_module(self, name: str, m: "Module") -> "Module":
        self._modules[name] = m
        return m

    def parameters(self):
        for p in self._params.values():
            yield p
        for m in self._modules.values():
            yield from m.parameters()

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def astype(self, dtype):
        """In-place dtype switch; used to run verification passes in float64."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"param {name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def he_normal(rng: np.random.Generator, shape, fan_in, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=1, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.w = self.add_param("w", Tensor(
            he_normal(rng, (cout, cin, k, k), cin * k * k, dtype), requires_grad=True))
        self.b = self.add_param("b", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, rng, din, dout, dtype=np.float32, zero_init=False):
        super().__init__()
        w = np.zeros((din, dout), dtype=dtype) if zero_init else he_normal(rng, (din, dout), din, dtype)
        self.w = self.add_param("w", Tensor(w, requires_grad=True))
        self.b = self.add_param("b", Tensor(np.zeros(dout, dtype=dtype), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.w, self.b)
