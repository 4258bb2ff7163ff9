"""AdamW with decoupled weight decay and a reduce-on-plateau schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def adamw_step(params: ParamStore, state: OptimState) -> None:
    """One in-place update from ``param.grad`` for every parameter.

    Weight decay is applied first as ``w -= lr * wd * w``; the bias-corrected
    Adam step follows. Each parameter is updated independently.
    """
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if t.grad.shape != t.shape:
            raise ValueError(f"gradient of {name!r} has shape {t.grad.shape}, expected {t.shape}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    lr, wd = state.lr, state.weight_decay
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w = t.data
        if wd:
            w -= lr * wd * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class PlateauState:
    """Maximizing reduce-on-plateau schedule with strict improvement."""

    lr: float = 1e-4
    factor: float = 2.0
    patience: int = 10
    min_lr: float = 1e-6
    best: float = float("-inf")
    stale_epochs: int = 0


def plateau_step(state: PlateauState, metric: float) -> bool:
    """Update from one epoch's metric; returns whether the lr was reduced."""
    if metric > state.best:
        state.best = metric
        state.stale_epochs = 0
        return False
    state.stale_epochs += 1
    if state.stale_epochs < state.patience:
        return False
    state.stale_epochs = 0
    new_lr = max(state.lr / state.factor, state.min_lr)
    reduced = new_lr < state.lr
    state.lr = new_lr
    return reduced
