"""Segmentation loss and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .augment import AugmentConfig, RngStream, augment_pair
from .checkpoint import Checkpoint, save_checkpoint
from .data import SamplePair, normalize_image, resize_pair
from .metrics import mean_dice
from .models import Model
from .optim import OptimState, PlateauState, adamw_step, plateau_step
from .tensor import ShapeError, Tape, Tensor, backward

LOG_HEADER = ("epoch", "train_loss", "val_mdice", "lr")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


def soft_dice(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """(2 sum(p t) + s) / (sum(p) + sum(t) + s) over every pixel of the batch."""
    p = F.sigmoid(logits)
    inter = (p * target).sum()
    return (2.0 * inter + smooth) / (p.sum() + target.sum() + smooth)


def bce_dice_loss(logits: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """Mean BCE on logits plus ``1 - soft_dice``; targets may be soft."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {logits.shape} and target {target.shape} differ in shape")
    return F.bce_with_logits(logits, target) + (1.0 - soft_dice(logits, target, smooth))


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    max_steps: int | None = None
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid training config {self}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_mdice: float
    lr: float

    def cells(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_mdice), repr(self.lr)]


@dataclass
class FitResult:
    best: Checkpoint | None
    log: list[LogRow] = field(default_factory=list)
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(r.cells())


def _stack(samples: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([normalize_image(s.image) for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


def train_step(model: Model, images: np.ndarray, masks: np.ndarray, opt: OptimState) -> float:
    """Forward, loss, backward and one AdamW update; returns the loss."""
    dtype = model.dtype
    x = Tensor(images.astype(dtype, copy=False))
    target = Tensor(model.train_target(masks).astype(dtype, copy=False))
    model.params.zero_grad()
    with Tape() as tape:
        loss = bce_dice_loss(model.logits(x), target)
    value = loss.item()
    if not math.isfinite(value):
        rec = tape.first_nonfinite()
        op = rec.op if rec is not None else None
        raise NumericalError(f"non-finite loss {value}; first non-finite op: {op}", op)
    backward(loss, tape, model.params)
    adamw_step(model.params, opt)
    return value


def validation_mdice(model: Model, samples: Sequence[SamplePair], batch_size: int = 8) -> float:
    images, masks = _stack(samples)
    probs = model.predict_proba(images, batch_size=batch_size)
    return mean_dice(probs, masks)


def fit(model: Model, train: Sequence[SamplePair], val: Sequence[SamplePair], cfg: TrainConfig,
        out_dir: str | Path | None = None, augment_cfg: AugmentConfig | None = None,
        on_epoch: Callable[[LogRow], None] | None = None) -> FitResult:
    """Train ``model`` in place, checkpointing whenever validation mDice improves.

    Samples are resized to the model input size once (soft masks). Each epoch
    reshuffles with a stream keyed by the epoch and augments each sample with
    a stream keyed by (epoch, sample index), so results do not depend on
    evaluation order. With ``out_dir`` the best checkpoint and the CSV log
    are written there as training progresses.
    """
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    hw = model.cfg.input_hw
    train = [resize_pair(s, hw, "soft") for s in train]
    val = [resize_pair(s, hw, "soft") for s in val]
    augment_cfg = augment_cfg or AugmentConfig()
    root = RngStream(cfg.seed)
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauState(lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = FitResult(best=None)

    for epoch in range(cfg.epochs):
        order = root.child(epoch, "shuffle").generator().permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [augment_pair(train[i], augment_cfg, root.child(epoch, int(i), "augment"))
                     if cfg.augment else train[i] for i in idx]
            images, masks = _stack(batch)
            losses.append(train_step(model, images, masks, opt))
            result.steps += 1
            if cfg.max_steps is not None and result.steps >= cfg.max_steps:
                break
        result.step_losses.extend(losses)
        vd = validation_mdice(model, val)
        row = LogRow(epoch, float(np.mean(losses)), vd, opt.lr)
        result.log.append(row)
        if vd > sched.best:
            result.best = Checkpoint(model.cfg, model.params.copy(), epoch, vd, cfg.seed,
                                     extra={"train_config": {k: v for k, v in vars(cfg).items()}})
            if out is not None:
                save_checkpoint(result.best, out / "best.ckpt")
        plateau_step(sched, vd)
        opt.lr = sched.lr
        if out is not None:
            write_log(result.log, out / "train_log.csv")
        if on_epoch is not None:
            on_epoch(row)
        if cfg.max_steps is not None and result.steps >= cfg.max_steps:
            break
    return result
