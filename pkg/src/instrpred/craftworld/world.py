"""Grid dynamics, observations and task generation."""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, replace

import numpy as np

from .recipes import (CHAR_SYMBOLS, RESOURCES, STATIONS, SYMBOL_CHARS, SYMBOL_IDS, SYMBOLS,
                      RecipeGraph, default_recipes)

ACTIONS = ("up", "down", "left", "right", "interact")
ACTION_IDS = {a: i for i, a in enumerate(ACTIONS)}
MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
# interact target search order: own cell, then neighbours in reading order
TARGET_OFFSETS = ((0, 0), (-1, 0), (0, -1), (0, 1), (1, 0))

DEFAULT_GRID = 7
DEFAULT_BUDGET = 120
DEFAULT_WINDOW = 5
LAYOUT_BUCKETS = 4


class ActionError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class ObservationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldState:
    grid: tuple[str, ...]                 # rows of symbol chars
    agent: tuple[int, int]
    inventory: tuple[tuple[str, int], ...]  # sorted (item, count), counts > 0
    goal_item: str
    rng_seed: int
    steps: int = 0
    max_steps: int = DEFAULT_BUDGET

    @property
    def size(self) -> int:
        return len(self.grid)

    def symbol(self, r: int, c: int) -> str:
        n = self.size
        if not (0 <= r < n and 0 <= c < n):
            return "wall"
        return CHAR_SYMBOLS[self.grid[r][c]]

    def inventory_counter(self) -> Counter:
        return Counter(dict(self.inventory))

    def has(self, item: str) -> bool:
        return any(i == item for i, _ in self.inventory)


@dataclass(frozen=True)
class TaskSpec:
    goal_item: str
    goal_text: str
    difficulty_steps: int
    seed: int
    layout_bucket: int

    @property
    def key(self) -> tuple[str, int]:
        return (self.goal_item, self.layout_bucket)


def goal_text_for(item: str) -> str:
    return f"make a {item}"


def _freeze_inventory(inv: Counter) -> tuple[tuple[str, int], ...]:
    return tuple(sorted((k, v) for k, v in inv.items() if v > 0))


def interact_target(state: WorldState, pos: tuple[int, int] | None = None) -> tuple[int, int] | None:
    r, c = state.agent if pos is None else pos
    for dr, dc in TARGET_OFFSETS:
        sym = state.symbol(r + dr, c + dc)
        if sym in RESOURCES or sym in STATIONS:
            return (r + dr, c + dc)
    return None


def step(state: WorldState, action, recipes: RecipeGraph | None = None) -> tuple[WorldState, bool, bool]:
    """Apply one action.  Returns ``(next_state, done, success)``."""
    if isinstance(action, (int, np.integer)) and 0 <= int(action) < len(ACTIONS):
        action = ACTIONS[int(action)]
    if action not in ACTION_IDS:
        raise ActionError(f"malformed action {action!r}; expected one of {ACTIONS}")
    recipes = recipes or default_recipes()
    grid, agent, inventory = state.grid, state.agent, state.inventory
    if action in MOVES:
        dr, dc = MOVES[action]
        r, c = agent[0] + dr, agent[1] + dc
        if state.symbol(r, c) != "wall":
            agent = (r, c)
    else:
        target = interact_target(state)
        if target is not None:
            tr, tc = target
            sym = state.symbol(tr, tc)
            inv = state.inventory_counter()
            if sym in RESOURCES:
                item = recipes.gatherables.get(sym)
                if item is not None:
                    inv[item] += 1
                    row = grid[tr]
                    grid = grid[:tr] + (row[:tc] + SYMBOL_CHARS["empty"] + row[tc + 1:],) + grid[tr + 1:]
            else:
                rec = recipes.craft_result(sym, inv)
                if rec is not None:
                    for i, n in rec.inputs:
                        inv[i] -= n
                    inv[rec.output] += 1
            inventory = _freeze_inventory(inv)
    nxt = replace(state, grid=grid, agent=agent, inventory=inventory, steps=state.steps + 1)
    success = nxt.has(state.goal_item)
    done = success or nxt.steps >= nxt.max_steps
    return nxt, done, success


# ---------------------------------------------------------------- observations

@dataclass(frozen=True)
class Observation:
    """Symbol-id grid (row-major), agent cell index (-1 when egocentric) and inventory counts."""

    cells: tuple[int, ...]
    agent: int
    inventory: tuple[int, ...]

    def to_text(self) -> str:
        grid = "".join(SYMBOL_CHARS[SYMBOLS[i]] for i in self.cells)
        return f"{grid}@{self.agent}|{','.join(map(str, self.inventory))}"

    @classmethod
    def from_text(cls, text: str) -> "Observation":
        grid, rest = text.split("@", 1)
        agent, inv = rest.split("|", 1)
        return cls(tuple(SYMBOL_IDS[CHAR_SYMBOLS[ch]] for ch in grid), int(agent),
                   tuple(int(x) for x in inv.split(",")) if inv else ())


def observe(state: WorldState, observability: str = "full", window: int = DEFAULT_WINDOW,
            recipes: RecipeGraph | None = None) -> Observation:
    recipes = recipes or default_recipes()
    inv = state.inventory_counter()
    counts = tuple(inv.get(i, 0) for i in recipes.items)
    if observability == "full":
        cells = tuple(SYMBOL_IDS[CHAR_SYMBOLS[ch]] for row in state.grid for ch in row)
        return Observation(cells, state.agent[0] * state.size + state.agent[1], counts)
    if observability != "partial":
        raise ObservationConfigError(f"unknown observability {observability!r}")
    if window < 1 or window % 2 == 0:
        raise ObservationConfigError(f"window must be a positive odd count, got {window}")
    h = window // 2
    r0, c0 = state.agent
    cells = tuple(SYMBOL_IDS[state.symbol(r, c)]
                  for r in range(r0 - h, r0 + h + 1) for c in range(c0 - h, c0 + h + 1))
    return Observation(cells, -1, counts)


def render(state: WorldState) -> str:
    rows = [list(r) for r in state.grid]
    r, c = state.agent
    rows[r][c] = "@"
    return "\n".join("".join(r) for r in rows)


# ---------------------------------------------------------------- generation

def _layout_walls(bucket: int, n: int, rng: np.random.Generator) -> set[tuple[int, int]]:
    """Wall family per layout bucket: a vertical, horizontal, diagonal or scattered barrier."""
    mid = n // 2
    if bucket == 0:
        col = mid
        gap = int(rng.integers(0, n))
        walls = {(r, col) for r in range(n) if abs(r - gap) > 0}
        walls -= {(int(rng.integers(0, n)), col)}
    elif bucket == 1:
        row = mid
        gap = int(rng.integers(0, n))
        walls = {(row, c) for c in range(n) if abs(c - gap) > 0}
        walls -= {(row, int(rng.integers(0, n)))}
    elif bucket == 2:
        walls = {(i, i) for i in range(1, n - 1) if i % 2 == 1}
        walls |= {(i, n - 1 - i) for i in range(1, n - 1) if i % 3 == 0}
    else:
        walls = set()
        for _ in range(n // 2 + 1):
            walls.add((int(rng.integers(0, n)), int(rng.integers(0, n))))
    return walls


def _connected(free: set[tuple[int, int]]) -> bool:
    if not free:
        return False
    start = next(iter(free))
    seen = {start}
    q = deque([start])
    while q:
        r, c = q.popleft()
        for dr, dc in MOVES.values():
            nb = (r + dr, c + dc)
            if nb in free and nb not in seen:
                seen.add(nb)
                q.append(nb)
    return len(seen) == len(free)


def generate_task(seed: int, difficulty_steps: int, grid_size: int = DEFAULT_GRID,
                  recipes: RecipeGraph | None = None, max_steps: int = DEFAULT_BUDGET,
                  window: int = DEFAULT_WINDOW, n_distractors: int = 3,
                  max_tries: int = 200) -> tuple[WorldState, TaskSpec]:
    """Deterministic level for ``seed``: a goal of the requested depth plus a layout that contains it.

    The layout bucket (``seed % LAYOUT_BUCKETS``) picks the wall family.  For
    difficulty >= 2 at least one required resource lies outside the agent's
    initial ``window``-wide view.
    """
    if grid_size < 5:
        raise GenerationError(f"grid_size must be >= 5, got {grid_size}")
    if not 1 <= difficulty_steps <= 5:
        raise GenerationError(f"difficulty_steps must be in 1..5, got {difficulty_steps}")
    recipes = recipes or default_recipes()
    goals = recipes.goals_at_depth(difficulty_steps)
    if not goals:
        raise GenerationError(f"no goal item has depth {difficulty_steps}")
    rng = np.random.default_rng([seed, difficulty_steps, grid_size])
    goal = goals[int(rng.integers(len(goals)))]
    bucket = seed % LAYOUT_BUCKETS
    need = recipes.resources_needed(goal)
    stations = sorted(recipes.stations_needed(goal))
    n = grid_size
    h = window // 2
    for _ in range(max_tries):
        walls = _layout_walls(bucket, n, rng)
        free = {(r, c) for r in range(n) for c in range(n)} - walls
        if not _connected(free):
            continue
        cells = sorted(free)
        order = rng.permutation(len(cells))
        picks = [cells[i] for i in order]
        placed: dict[tuple[int, int], str] = {}
        agent = picks[0]
        pool = picks[1:]
        for res, k in sorted(need.items()):
            for _ in range(k):
                placed[pool.pop()] = res
        for st in STATIONS:
            # every station is always present, needed or not
            placed[pool.pop()] = st
        for _ in range(n_distractors):
            placed[pool.pop()] = RESOURCES[int(rng.integers(len(RESOURCES)))]
        if difficulty_steps >= 2:
            outside = [p for p, s in placed.items()
                       if s in need and (abs(p[0] - agent[0]) > h or abs(p[1] - agent[1]) > h)]
            if not outside:
                continue
        grid = [[SYMBOL_CHARS["empty"]] * n for _ in range(n)]
        for r, c in walls:
            grid[r][c] = SYMBOL_CHARS["wall"]
        for (r, c), s in placed.items():
            grid[r][c] = SYMBOL_CHARS[s]
        state = WorldState(tuple("".join(row) for row in grid), agent, (), goal, seed, 0, max_steps)
        task = TaskSpec(goal, goal_text_for(goal), difficulty_steps, seed, bucket)
        return state, task
    raise GenerationError(f"could not place task for seed {seed} after {max_tries} tries")
