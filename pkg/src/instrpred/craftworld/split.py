from __future__ import annotations

from typing import Hashable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")


class SplitError(ValueError):
    pass


def split_tasks(tasks: Sequence[T], holdout_fraction: float, seed: int,
                key=lambda t: t.key) -> tuple[list[T], list[T]]:
    """Disjoint train/unseen split over task keys (goal item, layout bucket).

    ``round(holdout_fraction * n_keys)`` keys go to the unseen side, clamped so
    both sides keep at least one key.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise SplitError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    keys: list[Hashable] = sorted({key(t) for t in tasks})
    if len(keys) < 2:
        raise SplitError(f"need at least 2 distinct task keys, got {len(keys)}")
    n_unseen = min(max(int(round(holdout_fraction * len(keys))), 1), len(keys) - 1)
    perm = np.random.default_rng(seed).permutation(len(keys))
    unseen_keys = {keys[i] for i in perm[:n_unseen]}
    train = [t for t in tasks if key(t) not in unseen_keys]
    unseen = [t for t in tasks if key(t) in unseen_keys]
    return train, unseen
