"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradientTape, Tensor, backward

# Gradients below this magnitude count as zero: float64 central differences
# at h=1e-5 carry roughly 1e-11 of rounding noise.
GRAD_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitudes."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current ``inputs`` data.
    With ``max_entries`` only a random subset of each input's entries is probed.
    """
    with GradientTape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def value() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if max_entries is None or t.size <= max_entries:
            num = numeric_grad(value, t.data, h)
            worst = max(worst, relative_error(a, num))
            continue
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(t.size, size=max_entries, replace=False)
        flat = t.data.reshape(-1)
        num = np.empty(max_entries)
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num[j] = (up - down) / (2 * h)
        scale = max(float(np.abs(a).max()), float(np.abs(num).max()), GRAD_FLOOR)
        worst = max(worst, float(np.abs(a.reshape(-1)[picks] - num).max()) / scale)
    return worst
