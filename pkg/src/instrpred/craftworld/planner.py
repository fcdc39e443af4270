"""Oracle demonstrator: recipe-ordered subgoals, BFS navigation, templated instructions."""
from __future__ import annotations

import re
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .recipes import RecipeGraph, default_recipes
from .trajectory import InstructionSegment, Trajectory
from .world import (ACTION_IDS, MOVES, TaskSpec, WorldState, interact_target, observe, step)


class PlanningError(RuntimeError):
    pass


GATHER_TEMPLATES = (
    "mine the {obj}",
    "go to the {obj} and mine it",
    "grab {item} from the {obj}",
)
CRAFT_TEMPLATES = (
    "craft {item} at the {station}",
    "go to the {station} and craft {item}",
    "make {item} at the {station}",
)
_WORD = r"[a-z]+"
INSTRUCTION_GRAMMAR = tuple(
    re.compile("^" + t.replace("{obj}", f"(?P<obj>{_WORD})").replace("{item}", f"(?P<item>{_WORD})")
               .replace("{station}", f"(?P<station>{_WORD})") + "$")
    for t in GATHER_TEMPLATES + CRAFT_TEMPLATES
)


def parses(text: str) -> bool:
    return any(p.match(text) for p in INSTRUCTION_GRAMMAR)


@dataclass(frozen=True)
class Subgoal:
    kind: str      # "gather" | "craft"
    item: str
    target: str    # resource symbol or station

    def key(self):
        return (self.kind, self.item)


def plan_path(state: WorldState, target_symbol: str) -> list[tuple[int, int]] | None:
    """Shortest path to the nearest cell from which interact hits a ``target_symbol`` cell.

    Neighbours expand in up/down/left/right order, so ties break deterministically.
    """
    prev: dict[tuple[int, int], tuple[int, int] | None] = {state.agent: None}
    q = deque([state.agent])
    while q:
        pos = q.popleft()
        tgt = interact_target(state, pos)
        if tgt is not None and state.symbol(*tgt) == target_symbol:
            path = [pos]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        r, c = pos
        for dr, dc in MOVES.values():
            nb = (r + dr, c + dc)
            if nb not in prev and state.symbol(*nb) != "wall":
                prev[nb] = pos
                q.append(nb)
    return None


def _moves_for(path: list[tuple[int, int]]) -> list[str]:
    inv = {v: k for k, v in MOVES.items()}
    return [inv[(b[0] - a[0], b[1] - a[1])] for a, b in zip(path, path[1:])]


def subgoals_for(item: str, recipes: RecipeGraph) -> list[Subgoal]:
    out = []
    for it, n in sorted(recipes.requirements(item).items()):
        if recipes.is_raw(it):
            sg = Subgoal("gather", it, recipes.source_of[it])
        else:
            sg = Subgoal("craft", it, recipes.recipes[it].station)
        out.extend([sg] * n)
    return out


def _ready(sg: Subgoal, inv: Counter, recipes: RecipeGraph) -> bool:
    if sg.kind == "gather":
        return True
    rec = recipes.craft_result(sg.target, inv)
    return rec is not None and rec.output == sg.item


def _apply(sg: Subgoal, inv: Counter, recipes: RecipeGraph) -> Counter:
    inv = Counter(inv)
    if sg.kind == "craft":
        for i, n in recipes.recipes[sg.item].inputs:
            inv[i] -= n
    inv[sg.item] += 1
    return +inv


def _completable(pending: tuple[Subgoal, ...], inv: Counter, recipes: RecipeGraph,
                 memo: dict) -> bool:
    key = (tuple(sorted(s.key() for s in pending)), tuple(sorted(inv.items())))
    if key in memo:
        return memo[key]
    ok = not pending
    if not ok:
        tried = set()
        for i, sg in enumerate(pending):
            if sg.key() in tried or not _ready(sg, inv, recipes):
                continue
            tried.add(sg.key())
            if _completable(pending[:i] + pending[i + 1:], _apply(sg, inv, recipes), recipes, memo):
                ok = True
                break
    memo[key] = ok
    return ok


def instruction_text(sg: Subgoal, rng: np.random.Generator | None) -> str:
    templates = GATHER_TEMPLATES if sg.kind == "gather" else CRAFT_TEMPLATES
    t = templates[0] if rng is None else templates[int(rng.integers(len(templates)))]
    return t.format(obj=sg.target, item=sg.item, station=sg.target)


def oracle_rollout(state: WorldState, task: TaskSpec, max_steps: int | None = None,
                   recipes: RecipeGraph | None = None, observability: str = "full",
                   window: int = 5, synonyms: bool = True) -> Trajectory:
    """Solve ``task`` from ``state``, recording observations, actions and instruction segments.

    Among subgoals whose inputs are in hand, the planner pursues the nearest
    one that still leaves the rest of the plan completable.  Each subgoal's
    instruction interval opens on the step its pursuit starts.
    """
    recipes = recipes or default_recipes()
    budget = state.max_steps if max_steps is None else max_steps
    lang_rng = np.random.default_rng([task.seed, 7919]) if synonyms else None
    initial = state
    pending = tuple(subgoals_for(task.goal_item, recipes))
    memo: dict = {}
    if not _completable(pending, state.inventory_counter(), recipes, memo):
        raise PlanningError(f"no crafting order reaches {task.goal_item}")
    observations, actions, segments = [], [], []
    success = False
    while pending:
        inv = state.inventory_counter()
        best = None
        for i, sg in enumerate(pending):
            if not _ready(sg, inv, recipes):
                continue
            rest = pending[:i] + pending[i + 1:]
            if not _completable(rest, _apply(sg, inv, recipes), recipes, memo):
                continue
            path = plan_path(state, sg.target)
            if path is None:
                continue
            cand = (len(path), sg.kind, sg.item, i, path)
            if best is None or cand[:3] < best[:3]:
                best = cand
        if best is None:
            raise PlanningError(f"unreachable target while pursuing {task.goal_item} (seed {task.seed})")
        _, _, _, i, path = best
        sg = pending[i]
        pending = pending[:i] + pending[i + 1:]
        start = len(actions) + 1
        for a in _moves_for(path) + ["interact"]:
            if len(actions) >= budget:
                raise PlanningError(f"step budget {budget} exhausted before completing {task.goal_item}")
            observations.append(observe(state, observability, window, recipes))
            actions.append(ACTION_IDS[a])
            state, done, success = step(state, a, recipes)
        if state.inventory_counter()[sg.item] != inv[sg.item] + 1:
            raise PlanningError(f"subgoal {sg.kind} {sg.item} did not take effect")
        segments.append(InstructionSegment(instruction_text(sg, lang_rng), start, len(actions) + 1))
    if not success:
        raise PlanningError(f"plan finished without {task.goal_item}")
    return Trajectory(
        observations=observations,
        actions=actions,
        goal_text=task.goal_text,
        segments=segments,
        success=True,
        seed=task.seed,
        difficulty_steps=task.difficulty_steps,
        goal_item=task.goal_item,
        layout_bucket=task.layout_bucket,
        initial=initial,
    )
