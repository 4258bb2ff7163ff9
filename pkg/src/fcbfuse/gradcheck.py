"""Finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .params import ParamStore
from .tensor import Tape, Tensor, backward


class NondeterminismError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: str | None
    checked: int


@dataclass
class Stage:
    """One node of a :class:`StagedFunction`.

    ``fn`` receives the outputs of ``deps`` positionally. ``owns`` lists the
    parameter-name prefixes the node reads directly.
    """

    name: str
    fn: Callable[..., Tensor]
    deps: tuple[str, ...] = ()
    owns: tuple[str, ...] = ()
    per_sample: bool = False  # evaluate batch rows one at a time (e.g. a batch-coupled loss)


@dataclass
class StagedFunction:
    """A scalar function split into a DAG of cached stages.

    Calling it evaluates every stage. :meth:`evaluate_changed` re-evaluates
    only the stages downstream of one parameter, reusing cached values for
    the rest, which is what makes per-coordinate probing of a whole model
    affordable. Stages must be listed in dependency order; the last one is
    the output.
    """

    stages: Sequence[Stage]
    slice_elements: int = 1 << 16
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        seen = set()
        for st in self.stages:
            missing = [d for d in st.deps if d not in seen]
            if missing:
                raise ValueError(f"stage {st.name!r} depends on later or unknown stages {missing}")
            seen.add(st.name)

    def _run(self, dirty: set[str] | None) -> Tensor:
        values = {} if dirty is None else dict(self._cache)
        for st in self.stages:
            if dirty is None or st.name in dirty:
                values[st.name] = st.fn(*(values[d] for d in st.deps))
        if dirty is None:
            self._cache = values
        return values[self.stages[-1].name]

    def __call__(self) -> Tensor:
        return self._run(None)

    def owner(self, param: str) -> list[str]:
        return [st.name for st in self.stages
                if any(param == o or param.startswith(o + ".") for o in st.owns)]

    def _downstream(self, roots: set[str]) -> set[str]:
        dirty = set(roots)
        for st in self.stages:
            if any(d in dirty for d in st.deps):
                dirty.add(st.name)
        return dirty

    def evaluate_perturbations(self, param: str, flat: np.ndarray,
                               changes: Sequence[tuple[int, float]], chunk: int = 16) -> np.ndarray:
        """Scalar outputs after each single-coordinate change ``flat[i] = value``.

        The owning stage runs once per change; every later stage runs once per
        chunk on the changes stacked along the batch axis, which is exact
        because stages other than ``per_sample`` ones treat rows independently.
        ``flat`` must be a view of ``param``'s data and is restored afterwards.
        """
        if not self._cache:
            raise RuntimeError("call the staged function once before probing it")
        owners = self.owner(param)
        if len(owners) != 1:
            raise KeyError(f"parameter {param!r} must be read by exactly one stage, got {owners}")
        by_name = {st.name: st for st in self.stages}
        root = by_name[owners[0]]
        later = [st for st in self.stages
                 if st.name in self._downstream({root.name}) and st.name != root.name]
        results = []
        for start in range(0, len(changes), chunk):
            part = changes[start:start + chunk]
            outs = []
            for i, value in part:
                orig = flat[i]
                flat[i] = value
                try:
                    outs.append(root.fn(*(self._cache[d] for d in root.deps)))
                finally:
                    flat[i] = orig
            if not later:
                results.extend(o.item() for o in outs)
                continue
            n = len(part)
            values = {root.name: Tensor(np.concatenate([o.data for o in outs], axis=0))}
            for st in later:
                args = [values[d] if d in values else Tensor(np.repeat(self._cache[d].data, n, axis=0))
                        for d in st.deps]
                if st.per_sample:
                    rows = [st.fn(*(Tensor(a.data[b:b + 1]) for a in args)) for b in range(n)]
                    values[st.name] = Tensor(np.stack([r.data for r in rows]))
                    continue
                # large feature maps run in smaller slices so they stay cache-resident
                per_row = max(1, sum(a.size for a in args) // n)
                step = max(1, self.slice_elements // per_row)
                if step >= n:
                    values[st.name] = st.fn(*args)
                else:
                    parts = [st.fn(*(Tensor(a.data[b:b + step]) for a in args))
                             for b in range(0, n, step)]
                    values[st.name] = Tensor(np.concatenate([q.data for q in parts], axis=0))
            results.extend(values[self.stages[-1].name].data.reshape(n, -1)[:, 0].tolist())
        return np.asarray(results)

    def evaluate_changed(self, param: str) -> Tensor:
        """Value after an in-place change to ``param`` since the last full call."""
        if not self._cache:
            raise RuntimeError("call the staged function once before probing it")
        owners = set(self.owner(param))
        if not owners:
            raise KeyError(f"no stage reads parameter {param!r}")
        return self._run(self._downstream(owners))


def gradcheck(f: Callable[[], Tensor], params: ParamStore, eps: float = 1e-6,
              samples: int = 100, seed: int = 0, probe: StagedFunction | None = None) -> float:
    """Max relative error between tape gradients and central differences."""
    return gradcheck_detailed(f, params, eps, samples, seed, probe).max_rel_error


def gradcheck_detailed(f: Callable[[], Tensor], params: ParamStore, eps: float = 1e-6,
                       samples: int = 100, seed: int = 0,
                       probe: StagedFunction | None = None) -> GradcheckResult:
    """Compare analytic and numeric gradients of scalar ``f()`` w.r.t. ``params``.

    ``f`` must read its parameters from ``params``; the check perturbs the
    stored arrays in place and restores them. Up to ``samples`` coordinates
    are drawn per tensor (all of them for smaller tensors). Relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.

    Analytic gradients always come from ``f``. If a ``probe`` is given, the
    numeric side uses its incremental evaluation instead; it must reproduce
    ``f()`` exactly at the unperturbed point.
    """
    for name, t in params.items():
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 parameters; {name!r} is {t.dtype}")
    params.zero_grad()
    with Tape() as tape:
        root = f()
    backward(root, tape, params)
    analytic = {name: t.grad.copy() for name, t in params.items()}
    params.zero_grad()

    base = f().item()
    again = f().item()
    if base != again:
        raise NondeterminismError(f"two baseline evaluations differ: {base!r} vs {again!r}")
    if probe is not None:
        staged = probe().item()
        if staged != base:
            raise ValueError(f"staged probe disagrees with f at baseline: {staged!r} vs {base!r}")

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, None, 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError(f"parameter {name!r} is not contiguous")
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        grad = analytic[name].reshape(-1)
        if probe is not None:
            changes = [(i, flat[i] + s * eps) for i in idx for s in (1, -1)]
            shifted = probe.evaluate_perturbations(name, flat, changes).reshape(-1, 2)
        for k, i in enumerate(idx):
            if probe is None:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
            else:
                fp, fm = shifted[k]
            numeric = (fp - fm) / (2 * eps)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if err > worst:
                worst, worst_name = float(err), name
    return GradcheckResult(worst, worst_name, checked)
