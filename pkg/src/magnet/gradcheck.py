"""Central finite differences, used as the independent oracle for backward()."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, no_grad


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(()))


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5,
                           indices: Optional[Iterable[int]] = None) -> Tensor:
    """Estimate d f / d x by (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).

    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    When ``indices`` (flat positions) is given, only those entries are
    estimated and the rest of the result is zero.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + eps
            up = _scalar(f(x))
            flat[i] = original - eps
            down = _scalar(f(x))
            flat[i] = original
            grad[i] = (up - down) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape), dtype=np.float64)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def check_gradients(f: Callable[[], Tensor], tensors, eps: float = 1e-5, max_entries: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare backward() against finite differences for every tensor in ``tensors``.

    ``f`` takes no arguments and rebuilds the scalar loss from the current
    tensor values.  With ``max_entries`` only a random subset of each
    tensor's entries is probed.  Returns the worst relative error.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        else:
            idx = np.arange(t.size)
        numeric = finite_difference_grad(lambda _: f(), t, eps, indices=idx)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numeric.data.reshape(-1)[idx]))
    return worst
