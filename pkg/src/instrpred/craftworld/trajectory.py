from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any


class IntervalError(ValueError):
    pass


@dataclass(frozen=True)
class InstructionSegment:
    """One instruction and its half-open, 1-based step interval ``[start, end)``."""

    text: str
    start: int
    end: int

    def __post_init__(self):
        if self.start >= self.end:
            raise IntervalError(f"empty interval [{self.start}, {self.end}) for {self.text!r}")


@dataclass
class Trajectory:
    observations: list[Any]
    actions: list[int]
    goal_text: str
    segments: list[InstructionSegment]
    success: bool
    seed: int
    difficulty_steps: int = 0
    goal_item: str = ""
    layout_bucket: int = 0
    initial: Any = field(default=None, compare=False)

    def __post_init__(self):
        if len(self.observations) != len(self.actions):
            raise ValueError(f"{len(self.observations)} observations vs {len(self.actions)} actions")
        if self.segments:
            check_partition([(s.start, s.end) for s in self.segments], len(self.actions))

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def annotated(self) -> bool:
        return bool(self.segments)

    @property
    def intervals(self) -> list[tuple[int, int]]:
        return [(s.start, s.end) for s in self.segments]

    @property
    def key(self) -> tuple[str, int]:
        return (self.goal_item, self.layout_bucket)


def check_partition(intervals: list[tuple[int, int]], T: int) -> None:
    """Raise unless ``intervals`` tile ``[1, T + 1)`` contiguously."""
    if not intervals:
        raise IntervalError("no intervals")
    expect = 1
    for a, b in intervals:
        if a != expect or b <= a:
            raise IntervalError(f"intervals {intervals} do not partition [1, {T + 1})")
        expect = b
    if expect != T + 1:
        raise IntervalError(f"intervals {intervals} do not partition [1, {T + 1})")
