"""Flat name -> Tensor parameter stores with prefix views."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ParamStore(dict):
    """Ordered mapping of dotted names to leaf tensors.

    ``sub("stage0.mgdf")`` returns a view keyed by the remaining suffix; the
    view shares tensor objects with the parent, so updates propagate.
    """

    def sub(self, prefix: str) -> "ParamStore":
        pre = prefix + "."
        view = ParamStore((k[len(pre):], v) for k, v in self.items() if k.startswith(pre))
        if not view:
            raise KeyError(f"no parameters under prefix {prefix!r}")
        return view

    def has(self, prefix: str) -> bool:
        pre = prefix + "."
        return any(k.startswith(pre) for k in self)

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def numel(self) -> int:
        return sum(t.data.size for t in self.values())

    def copy_data(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}


class Initializer:
    """Builds a ParamStore deterministically from one numpy Generator."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.store = ParamStore()

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.store:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.store[name] = t
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
        bound = gain / np.sqrt(fan_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=shape))

    def conv(self, name: str, k: int, cin: int, cout: int, bias: bool = True,
             gain: float = 1.0) -> None:
        self.uniform(f"{name}.w", (k, k, cin, cout), k * k * cin, gain)
        if bias:
            self.const(f"{name}.b", np.zeros(cout))

    def dwconv(self, name: str, k: int, c: int) -> None:
        self.uniform(f"{name}.w", (k, k, c), k * k)

    def linear(self, name: str, cin: int, cout: int, bias: bool = True) -> None:
        self.uniform(f"{name}.w", (cin, cout), cin)
        if bias:
            self.const(f"{name}.b", np.zeros(cout))

    def norm(self, name: str, c: int) -> None:
        self.const(f"{name}.gamma", np.ones(c))
        self.const(f"{name}.beta", np.zeros(c))

    def const(self, name: str, value) -> Tensor:
        return self._add(name, np.array(value, dtype=np.float64))
