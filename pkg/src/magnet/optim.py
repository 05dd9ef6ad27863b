"""Adam and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .errors import ConfigError, DivergenceError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


def adam_step(params: Mapping[str, Tensor], state: OptimizerState,
              grads: Optional[Mapping[str, np.ndarray]] = None) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    Gradients default to each parameter's ``.grad``; a missing gradient
    counts as zero.
    """
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr_t = float(state.lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t))
    eps_t = float(state.eps * np.sqrt(1.0 - b2 ** t))
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        # eps is applied to the bias-corrected second moment
        p.data -= lr_t * m / (np.sqrt(v) + eps_t)
    return state


class EarlyStopping:
    """Stop once validation loss has not improved by more than ``min_delta``
    for ``patience`` consecutive epochs.

    ``best_epoch`` (1-based) always points at the lowest loss seen, even if
    that improvement was smaller than ``min_delta``.
    """

    def __init__(self, patience: int = 10, min_delta: float = 1e-4):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.min_delta = min_delta
        self.reference = float("inf")
        self.best_loss = float("inf")
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; return True when training should stop."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
        if val_loss < self.reference - self.min_delta:
            self.reference = val_loss
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def early_stopping(val_losses: List[float], patience: int, min_delta: float = 1e-4) -> str:
    """'stop' or 'continue' after replaying a history of validation losses."""
    rule = EarlyStopping(patience, min_delta)
    for loss in val_losses:
        if rule.update(loss):
            return "stop"
    return "continue"
