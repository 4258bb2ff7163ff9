"""Named parameter storage and seeded initialization."""
from __future__ import annotations

from collections.abc import Iterator, MutableMapping

import numpy as np

from .tensor import Tensor


class ParamStore(MutableMapping):
    """Map from dot-separated names to trainable tensors.

    Iteration is lexicographic so optimizer updates, checkpoints and
    parameter walks are independent of construction order.
    """

    def __init__(self, tensors=None):
        self._tensors: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name: str, value) -> None:
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._tensors[name] = t

    def __delitem__(self, name: str) -> None:
        del self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._tensors))

    def __len__(self) -> int:
        return len(self._tensors)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def numel(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.astype(dtype)) for k, t in self.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: Tensor(t.data.copy()) for k, t in self.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self.items()}


class ParamScope:
    """Read-only view of a store under a name prefix."""

    __slots__ = ("store", "prefix")

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _key(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._key(name)]

    def __contains__(self, name: str) -> bool:
        return self._key(name) in self.store

    def get(self, name: str, default=None):
        return self.store.get(self._key(name), default)

    def scope(self, name: str) -> "ParamScope":
        return ParamScope(self.store, self._key(name))

    def __repr__(self) -> str:
        return f"ParamScope({self.prefix!r})"


class ParamBuilder:
    """Declares parameters by name; materializes them or only records shapes.

    With an ``rng`` the builder fills a :class:`ParamStore`: conv and linear
    weights are uniform with std ``1/sqrt(fan_in)``, biases and norm shifts
    zero, norm scales one. Without one it only collects shapes, which is
    how large presets are audited without allocating them.
    """

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32, prefix: str = "",
                 _sink: dict | None = None):
        self.rng = rng
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.entries: dict = {} if _sink is None else _sink

    def scope(self, name: str) -> "ParamBuilder":
        return ParamBuilder(self.rng, self.dtype, self._key(name), self.entries)

    def _key(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def add(self, name: str, shape: tuple[int, ...], init: str, fan_in: int = 1) -> None:
        key = self._key(name)
        if key in self.entries:
            raise KeyError(f"parameter {key!r} declared twice")
        shape = tuple(int(s) for s in shape)
        if self.rng is None:
            self.entries[key] = shape
            return
        if init == "fan_in":
            bound = np.sqrt(3.0 / fan_in)
            value = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.entries[key] = value.astype(self.dtype)

    def conv(self, name: str, cout: int, cin: int, k: int, bias: bool = True, groups: int = 1) -> None:
        fan_in = (cin // groups) * k * k
        self.add(f"{name}.weight", (cout, cin // groups, k, k), "fan_in", fan_in)
        if bias:
            self.add(f"{name}.bias", (cout,), "zeros")

    def linear(self, name: str, din: int, dout: int, bias: bool = True) -> None:
        self.add(f"{name}.weight", (din, dout), "fan_in", din)
        if bias:
            self.add(f"{name}.bias", (dout,), "zeros")

    def norm(self, name: str, c: int) -> None:
        self.add(f"{name}.weight", (c,), "ones")
        self.add(f"{name}.bias", (c,), "zeros")

    def build(self) -> ParamStore:
        if self.rng is None:
            raise RuntimeError("shape-only builder cannot materialize parameters")
        return ParamStore(self.entries)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        if self.rng is None:
            return dict(self.entries)
        return {k: v.shape for k, v in self.entries.items()}


def param_count(params) -> int:
    """Total element count of a store or of a name -> shape mapping."""
    total = 0
    for value in params.values():
        shape = value.shape if hasattr(value, "shape") else value
        total += int(np.prod(shape, dtype=np.int64))
    return total
