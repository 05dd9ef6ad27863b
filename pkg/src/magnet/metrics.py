"""Training losses and evaluation statistics for both heads.

Losses operate on :class:`~magnet.tensor.Tensor` and are differentiable.
Everything else works on integer counts so that reductions are exact and
order independent.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .model import CLASS_NAMES
from .tensor import Tensor

PROB_EPS = 1e-7


def _target(target, like: Tensor) -> Tensor:
    return target if isinstance(target, Tensor) else Tensor(target, dtype=like.dtype)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy over every element, with probabilities clamped."""
    y = _target(target, pred)
    if y.shape != pred.shape:
        raise ShapeError(f"bce_loss: pred {pred.shape} vs target {y.shape}")
    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    ll = T.add(T.mul(y, T.log(p)), T.mul(T.sub(1.0, y), T.log(T.sub(1.0, p))))
    return T.multiply_scalar(T.mean(ll), -1.0)


def ce_loss(pred: Tensor, target) -> Tensor:
    """Categorical cross entropy averaged over the batch; ``target`` is one-hot."""
    t = _target(target, pred)
    if t.shape != pred.shape or pred.ndim != 2:
        raise ShapeError(f"ce_loss: pred {pred.shape} vs target {t.shape}")
    td = t.data
    if not (np.all((td == 0) | (td == 1)) and np.all(td.sum(axis=1) == 1)):
        raise ContractError("ce_loss: target rows must be one-hot")
    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return T.multiply_scalar(T.tensor_sum(T.mul(t, T.log(p))), -1.0 / pred.shape[0])


def combined_loss(mask_pred: Tensor, mask_gt, class_pred: Tensor, class_gt, lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise ConfigError(f"loss weight must be non-negative, got {lam}")
    return T.add(bce_loss(mask_pred, mask_gt), T.multiply_scalar(ce_loss(class_pred, class_gt), lam))


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ----------------------------------------------------------------------
# segmentation


def _binary(a, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ContractError(f"seg_counts: {what} mask must contain only 0 and 1")
    return a.astype(bool)


def seg_counts(pred_mask, gt_mask) -> Tuple[int, int, int, int]:
    """(TP, FP, FN, TN) pixel counts."""
    p, g = _binary(pred_mask, "predicted"), _binary(gt_mask, "ground-truth")
    if p.shape != g.shape:
        raise ShapeError(f"seg_counts: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn, int(p.size - tp - fp - fn)


def _check_counts(*counts) -> None:
    if any(c < 0 for c in counts):
        raise ContractError(f"counts must be non-negative, got {counts}")


def dice(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    _check_counts(tp, fp, fn)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def iou(tp: int, fp: int, fn: int) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    _check_counts(tp, fp, fn)
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def pixel_accuracy(tp: int, fp: int, fn: int, tn: int) -> float:
    _check_counts(tp, fp, fn, tn)
    total = tp + fp + fn + tn
    if total == 0:
        raise ContractError("pixel_accuracy: no pixels")
    return (tp + tn) / total


# ----------------------------------------------------------------------
# classification


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray
    class_names: Tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = self.counts.shape[0]
        if self.counts.shape != (k, k) or np.any(self.counts < 0):
            raise ContractError("confusion matrix must be square with non-negative counts")
        self.class_names = tuple(self.class_names)
        if len(self.class_names) != k:
            self.class_names = tuple(f"class{i}" for i in range(k))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.class_names)


def confusion_matrix(pred_labels: Sequence[int], true_labels: Sequence[int], num_classes: int = 3,
                     class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    pred = np.asarray(pred_labels, dtype=int).reshape(-1)
    true = np.asarray(true_labels, dtype=int).reshape(-1)
    if pred.shape != true.shape:
        raise ShapeError(f"confusion_matrix: {pred.size} predictions vs {true.size} labels")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"labels must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    names = class_names if class_names is not None else (CLASS_NAMES if num_classes == 3 else ())
    return ConfusionMatrix(counts, tuple(names))


def _ratio(num: int, denom: int, what: str, notes: List[str]) -> float:
    if denom == 0:
        notes.append(f"{what}: zero denominator, reported as 0")
        return 0.0
    return num / denom


def _f1(tp: int, fp: int, fn: int) -> float:
    # harmonic mean of precision and recall, written over counts so that
    # p == r gives f1 == p bit-for-bit
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def micro_average(cm: ConfusionMatrix, split: Optional[Tuple[ConfusionMatrix, ConfusionMatrix]] = None
                  ) -> Tuple[float, float, float]:
    """Micro precision, recall and F1 from class-pooled TP/FP/FN.

    ``split`` optionally gives the confusion matrices of two disjoint
    subsets of the samples; their counts are pooled subset by subset.
    They must add up to ``cm``.
    """
    parts = [cm] if split is None else list(split)
    if split is not None:
        if len(parts) != 2 or not np.array_equal(parts[0].counts + parts[1].counts, cm.counts):
            raise ContractError("micro_average: split does not partition the samples of cm")
    tp = fp = fn = 0
    for part in parts:
        c = part.counts
        diag = np.diag(c)
        tp += int(diag.sum())
        fp += int((c.sum(axis=0) - diag).sum())
        fn += int((c.sum(axis=1) - diag).sum())
    notes: List[str] = []
    return (_ratio(tp, tp + fp, "micro precision", notes),
            _ratio(tp, tp + fn, "micro recall", notes),
            _f1(tp, fp, fn))


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    class_names: List[str]
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    micro_precision: float
    micro_recall: float
    micro_f1: float
    accuracy: float
    confusion: List[List[int]] = field(default_factory=list)
    segmentation: Dict[str, float] = field(default_factory=dict)
    losses: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        """Per-class rows plus a micro-average row, values rounded half-up to 2 places."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for i, name in enumerate(self.class_names):
            writer.writerow([name] + [f"{round_half_up(v[i]):.2f}" for v in (self.precision, self.recall, self.f1)]
                            + [self.support[i]])
        writer.writerow(["micro avg"] + [f"{round_half_up(v):.2f}" for v in
                                         (self.micro_precision, self.micro_recall, self.micro_f1)]
                        + [sum(self.support)])
        return buf.getvalue()


def classification_report(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision / recall / F1 / support plus micro averages."""
    c = cm.counts
    notes: List[str] = []
    precision, recall, f1 = [], [], []
    for k, name in enumerate(cm.class_names):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        precision.append(_ratio(tp, tp + fp, f"precision[{name}]", notes))
        recall.append(_ratio(tp, tp + fn, f"recall[{name}]", notes))
        f1.append(_f1(tp, fp, fn))
    for note in notes:
        warnings.warn(note, RuntimeWarning, stacklevel=2)
    mp, mr, mf = micro_average(cm)
    return MetricsReport(
        class_names=list(cm.class_names), precision=precision, recall=recall, f1=f1,
        support=[int(s) for s in cm.support], micro_precision=mp, micro_recall=mr, micro_f1=mf,
        accuracy=cm.accuracy, confusion=c.tolist(), warnings=notes,
    )


class SegmentationAccumulator:
    """Pools per-image counts; reports mean-of-images and global dice/IoU."""

    def __init__(self):
        self.dice_scores: List[float] = []
        self.iou_scores: List[float] = []
        self.totals = np.zeros(4, dtype=np.int64)
        self.empty = 0

    def update(self, pred_mask, gt_mask) -> None:
        tp, fp, fn, tn = seg_counts(pred_mask, gt_mask)
        if tp + fp + fn == 0:
            self.empty += 1
        self.dice_scores.append(dice(tp, fp, fn))
        self.iou_scores.append(iou(tp, fp, fn))
        self.totals += (tp, fp, fn, tn)

    def summary(self) -> Dict[str, float]:
        tp, fp, fn, tn = (int(v) for v in self.totals)
        n = len(self.dice_scores)
        return {
            "dice_mean": math.fsum(self.dice_scores) / n if n else 0.0,
            "iou_mean": math.fsum(self.iou_scores) / n if n else 0.0,
            "dice_global": dice(tp, fp, fn),
            "iou_global": iou(tp, fp, fn),
            "pixel_accuracy": pixel_accuracy(tp, fp, fn, tn) if n else 0.0,
            "images": n,
            "empty_mask_pairs": self.empty,
        }
