"""Multi-task training and evaluation loops."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .metrics import (
    MetricsReport,
    SegmentationAccumulator,
    bce_loss,
    ce_loss,
    classification_report,
    combined_loss,
    confusion_matrix,
    one_hot,
)
from .model import MAGNet, ModelConfig
from .optim import EarlyStopping, OptimizerState, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.magn"
HISTORY_NAME = "history.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    min_delta: float = 1e-4
    loss_weight: float = 1.0
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.loss_weight < 0:
            raise ConfigError(f"loss_weight must be non-negative, got {self.loss_weight}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class TrainHistory:
    records: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, epoch: int, train_loss: float, val_loss: float, val_dice: float, val_acc: float) -> None:
        self.records.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                             "val_dice": val_dice, "val_acc": val_acc})

    def __len__(self) -> int:
        return len(self.records)

    def column(self, key: str) -> List[float]:
        return [r[key] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        best = min(records, key=lambda r: r["val_loss"])["epoch"] if records else 0
        return cls(records, best)


@dataclass
class Checkpoint:
    """Best-epoch parameters together with the config and history that produced them."""

    state: Dict[str, np.ndarray]
    config: ModelConfig
    history: TrainHistory
    path: Optional[Path] = None


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def _inputs(ds: Dataset, idx, dtype) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return ds.images(idx).astype(dtype), ds.masks(idx).astype(dtype), ds.labels(idx)


def train(model_config: ModelConfig, config: TrainConfig, train_ds: Dataset, val_ds: Dataset,
          out_dir=None) -> Tuple[MAGNet, TrainHistory, Checkpoint]:
    """Adam on BCE + lambda * CE with per-epoch validation and early stopping.

    When ``out_dir`` is given the checkpoint is rewritten at every new best
    epoch and ``history.jsonl`` after every epoch.  The returned model
    carries the best epoch's weights.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ConfigError("training and validation sets must be non-empty")
    if config.batch_size > len(train_ds):
        raise ConfigError(f"batch_size {config.batch_size} exceeds training set size {len(train_ds)}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    dtype = np.dtype(config.precision)
    model = MAGNet(model_config, seed=config.seed, dtype=dtype)
    params = model.parameters()
    opt = OptimizerState(config.lr, config.beta1, config.beta2, config.adam_eps)
    stopper = EarlyStopping(config.patience, config.min_delta)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    best_state = model.state_dict()
    num_classes = model_config.num_classes

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_ds))
        total, seen = [], 0
        for idx in _batches(len(train_ds), config.batch_size, order):
            x, y, labels = _inputs(train_ds, idx, dtype)
            model.zero_grad()
            mask_p, cls_p = model.forward(x)
            loss = combined_loss(mask_p, y, cls_p, one_hot(labels, num_classes).astype(dtype), config.loss_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"training loss became {value} at epoch {epoch}")
            loss.backward()
            adam_step(params, opt)
            total.append(value * len(idx))
            seen += len(idx)

        with warnings.catch_warnings():
            # early epochs often predict one class only; report.warnings keeps the record
            warnings.simplefilter("ignore", RuntimeWarning)
            report = evaluate(model, val_ds, loss_weight=config.loss_weight)
        val_loss = report.losses["combined"]
        if not math.isfinite(val_loss):
            raise DivergenceError(f"validation loss became {val_loss} at epoch {epoch}")
        history.append(epoch, math.fsum(total) / seen, val_loss,
                       report.segmentation["dice_mean"], report.accuracy)
        stop = stopper.update(val_loss)
        log.info("epoch %d train_loss %.5f val_loss %.5f val_dice %.4f val_acc %.4f", epoch,
                 history.records[-1]["train_loss"], val_loss, report.segmentation["dice_mean"], report.accuracy)
        if stopper.improved:
            best_state = model.state_dict()
            if out_dir is not None:
                ckpt.save(out_dir / CHECKPOINT_NAME, model)
        if out_dir is not None:
            (out_dir / HISTORY_NAME).write_text(history.to_jsonl())
        if stop:
            history.stopped_early = True
            log.info("early stopping after epoch %d; best epoch %d", epoch, stopper.best_epoch)
            break

    history.best_epoch = stopper.best_epoch
    model.load_state_dict(best_state)
    path = out_dir / CHECKPOINT_NAME if out_dir is not None else None
    return model, history, Checkpoint(best_state, model_config, history, path)


def predict(model: MAGNet, images: np.ndarray, batch_size: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Mask and class probabilities for a stack of (h, w, 1) images."""
    masks, probs = [], []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            m, c = model.forward(np.asarray(images[start:start + batch_size], dtype=model.dtype))
            masks.append(m.data)
            probs.append(c.data)
    return np.concatenate(masks), np.concatenate(probs)


def evaluate(model: MAGNet, ds: Dataset, batch_size: int = 16, loss_weight: float = 1.0) -> MetricsReport:
    """Segmentation and classification statistics over ``ds``, plus losses."""
    cfg = model.config
    seg = SegmentationAccumulator()
    preds, bce_sum, ce_sum = [], [], []
    with T.no_grad():
        for idx in _batches(len(ds), batch_size, np.arange(len(ds))):
            x, y, labels = _inputs(ds, idx, model.dtype)
            mask_p, cls_p = model.forward(x)
            bce_sum.append(bce_loss(mask_p, y).item() * len(idx))
            ce_sum.append(ce_loss(cls_p, one_hot(labels, cfg.num_classes).astype(model.dtype)).item() * len(idx))
            binary = (mask_p.data >= cfg.seg_threshold).astype(np.uint8)
            for b in range(len(idx)):
                seg.update(binary[b], y[b].astype(np.uint8))
            preds.extend(cls_p.data.argmax(axis=1).tolist())
    cm = confusion_matrix(preds, ds.labels(), cfg.num_classes)
    report = classification_report(cm)
    report.segmentation = seg.summary()
    bce, ce = math.fsum(bce_sum) / len(ds), math.fsum(ce_sum) / len(ds)
    report.losses = {"bce": bce, "ce": ce, "combined": bce + loss_weight * ce}
    return report
