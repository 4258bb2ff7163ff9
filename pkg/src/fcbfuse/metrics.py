"""Per-sample segmentation metrics and evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import functional as F

THRESHOLD = 0.5
CONVENTIONS = {
    "threshold": THRESHOLD,
    "threshold_rule": "prob >= threshold is foreground",
    "both_empty": "all metrics 1",
    "zero_denominator_otherwise": 0.0,
    "averaging": "per-sample then mean",
}


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def confusion_counts(pred: np.ndarray, target: np.ndarray) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) pixel counts of two binary masks."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    return tp, fp, fn, pred.size - tp - fp - fn


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def sample_metrics(counts: tuple[int, int, int, int]) -> tuple[float, float, float, float]:
    """(dice, iou, precision, recall) for one sample.

    When both masks are empty every metric is 1; any other zero denominator
    yields 0.
    """
    tp, fp, fn, _ = counts
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0, 1.0
    return (_ratio(2 * tp, 2 * tp + fp + fn), _ratio(tp, tp + fp + fn),
            _ratio(tp, tp + fp), _ratio(tp, tp + fn))


@dataclass
class MetricsRow:
    id: str
    dice: float
    iou: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    name: str
    rows: list[MetricsRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.id)

    @property
    def count(self) -> int:
        return len(self.rows)

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.rows])) if self.rows else 0.0

    @property
    def means(self) -> dict[str, float]:
        return {"mDice": self._mean("dice"), "mIoU": self._mean("iou"),
                "mPrecision": self._mean("precision"), "mRecall": self._mean("recall")}

    def summary(self) -> dict:
        return {"name": self.name, "count": self.count, **self.means,
                "conventions": CONVENTIONS, "metadata": self.metadata}

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "dice", "iou", "precision", "recall"])
            for r in self.rows:
                w.writerow([r.id, repr(r.dice), repr(r.iou), repr(r.precision), repr(r.recall)])
        json_path.write_text(json.dumps(self.summary(), indent=2, ensure_ascii=False) + "\n")
        return csv_path, json_path

    def format_means(self) -> str:
        m = self.means
        return (f"{self.name}: n={self.count} mDice={m['mDice']:.4f} mIoU={m['mIoU']:.4f} "
                f"mPrec={m['mPrecision']:.4f} mRec={m['mRecall']:.4f}")


def score_masks(ids: Sequence[str], preds: np.ndarray, targets: np.ndarray) -> list[MetricsRow]:
    rows = []
    for sid, p, t in zip(ids, preds, targets):
        rows.append(MetricsRow(sid, *sample_metrics(confusion_counts(p, t))))
    return rows


def mean_dice(probs: np.ndarray, targets: np.ndarray) -> float:
    """mDice of probability maps against soft targets, both binarized at 0.5."""
    rows = score_masks([str(i) for i in range(len(probs))], binarize(probs), binarize(targets))
    return float(np.mean([r.dice for r in rows]))


def prepare_eval_arrays(samples, input_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Normalized network inputs and binarized targets at ``input_hw``."""
    h, w = input_hw
    images, targets = [], []
    for s in samples:
        images.append(F.resize_array(s.image, h, w, "bilinear", antialias=True) * 2.0 - 1.0)
        targets.append(binarize(F.resize_array(s.mask, h, w, "bilinear", antialias=True)))
    return np.stack(images).astype(np.float32), np.stack(targets)


def evaluate_split(predict_proba: Callable[[np.ndarray], np.ndarray], samples,
                   input_hw: tuple[int, int], name: str, metadata: dict | None = None
                   ) -> MetricsReport:
    """Score ``predict_proba`` (normalized images -> full-size probabilities) on ``samples``."""
    if not samples:
        raise ValueError(f"no samples to evaluate for report {name!r}")
    images, targets = prepare_eval_arrays(samples, input_hw)
    probs = predict_proba(images)
    if probs.shape != targets.shape:
        raise ValueError(f"predictions {probs.shape} do not match targets {targets.shape}")
    rows = score_masks([s.id for s in samples], binarize(probs), targets)
    meta = {"input_hw": list(input_hw), **(metadata or {})}
    return MetricsReport(name, rows, meta)


def generalisability_eval(predict_proba, dataset_b, input_hw: tuple[int, int],
                          train_name: str, test_name: str) -> MetricsReport:
    """Evaluate a model trained on one dataset over the whole of another."""
    return evaluate_split(predict_proba, dataset_b, input_hw, f"train:{train_name}→test:{test_name}",
                          {"mode": "full-dataset"})
