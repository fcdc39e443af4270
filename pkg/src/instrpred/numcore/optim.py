from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}, norm


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> float:
    """One in-place Adam/AdamW update.  Returns the pre-clip global grad norm.

    Weight decay is decoupled and only touches parameters of rank >= 2
    (biases, gains and position tables of rank 1 are left alone).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    if state.grad_clip_norm is not None:
        grads, norm = clip_by_global_norm(grads, state.grad_clip_norm)
    else:
        norm = global_norm(grads)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay and p.ndim >= 2:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)).astype(p.dtype, copy=False)
    return norm
