"""Recipe graph and its plain-text file format.

One recipe per line, whitespace separated, ``#`` starts a comment::

    # kind   output  inputs         station    depth
    gather   wood    tree           -          1
    craft    plank   wood           workbench  2
    craft    torch   wood+fiber*1   workbench  3

``gather`` rows name the resource symbol the item is mined from.  ``craft``
rows list the input multiset as ``item[*count]`` joined by ``+``.  ``depth``
is the number of distinct items (gathered or crafted, the output included)
in the item's dependency closure and is checked on load.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

RESOURCES = ("tree", "rock", "grass", "ore")
STATIONS = ("workbench", "furnace", "anvil")
# closed grid alphabet; index = token id
SYMBOLS = ("empty", "wall") + RESOURCES + STATIONS
SYMBOL_CHARS = {"empty": ".", "wall": "#", "tree": "T", "rock": "R", "grass": "G", "ore": "O",
                "workbench": "W", "furnace": "F", "anvil": "A"}
CHAR_SYMBOLS = {c: s for s, c in SYMBOL_CHARS.items()}
SYMBOL_IDS = {s: i for i, s in enumerate(SYMBOLS)}


class RecipeError(ValueError):
    pass


@dataclass(frozen=True)
class Recipe:
    output: str
    inputs: tuple[tuple[str, int], ...]
    station: str
    order: int

    @property
    def input_count(self) -> int:
        return sum(n for _, n in self.inputs)


@dataclass(frozen=True)
class RecipeGraph:
    gatherables: dict[str, str]          # resource symbol -> item
    recipes: dict[str, Recipe]           # output item -> recipe

    def __post_init__(self):
        for res in self.gatherables:
            if res not in RESOURCES:
                raise RecipeError(f"unknown resource symbol {res!r}")
        raw = set(self.gatherables.values())
        for rec in self.recipes.values():
            if rec.station not in STATIONS:
                raise RecipeError(f"unknown station {rec.station!r} for {rec.output}")
            if rec.output in raw:
                raise RecipeError(f"{rec.output} is both gathered and crafted")
        for item in self.items:
            self.depth(item)  # raises on cycles / unknown inputs

    @cached_property
    def items(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.gatherables.values()) | set(self.recipes)))

    @cached_property
    def source_of(self) -> dict[str, str]:
        return {item: res for res, item in self.gatherables.items()}

    def is_raw(self, item: str) -> bool:
        return item in self.source_of

    def closure(self, item: str, _stack: tuple[str, ...] = ()) -> frozenset[str]:
        if item in _stack:
            raise RecipeError(f"recipe cycle through {item}")
        if self.is_raw(item):
            return frozenset([item])
        rec = self.recipes.get(item)
        if rec is None:
            raise RecipeError(f"item {item!r} is neither gathered nor crafted")
        out = {item}
        for inp, _ in rec.inputs:
            out |= self.closure(inp, _stack + (item,))
        return frozenset(out)

    def depth(self, item: str) -> int:
        return len(self.closure(item))

    def goals_at_depth(self, depth: int) -> list[str]:
        return [i for i in self.items if self.depth(i) == depth]

    def requirements(self, item: str) -> Counter:
        """Units of every item (the goal included) that must be obtained to make ``item``."""
        need: Counter = Counter()

        def visit(it: str, n: int) -> None:
            need[it] += n
            if not self.is_raw(it):
                for inp, k in self.recipes[it].inputs:
                    visit(inp, n * k)

        visit(item, 1)
        return need

    def stations_needed(self, item: str) -> set[str]:
        return {self.recipes[i].station for i in self.closure(item) if not self.is_raw(i)}

    def resources_needed(self, item: str) -> Counter:
        need = self.requirements(item)
        return Counter({self.source_of[i]: n for i, n in need.items() if self.is_raw(i)})

    def craft_result(self, station: str, inventory: Counter) -> Recipe | None:
        """Recipe fired by interacting with ``station`` holding ``inventory``.

        Among satisfied recipes the one consuming the most units wins; ties go
        to file order.
        """
        best = None
        for rec in self.recipes.values():
            if rec.station != station:
                continue
            if all(inventory.get(i, 0) >= n for i, n in rec.inputs):
                if best is None or rec.input_count > best.input_count:
                    best = rec
        return best


DEFAULT_RECIPES = """\
# kind   output   inputs          station    depth
gather   wood     tree            -          1
gather   stone    rock            -          1
gather   fiber    grass           -          1
gather   iron     ore             -          1
craft    plank    wood            workbench  2
craft    rope     fiber           workbench  2
craft    brick    stone           furnace    2
craft    ingot    iron            furnace    2
craft    torch    wood+fiber      workbench  3
craft    axe      wood+stone      workbench  3
craft    bucket   ingot           anvil      3
craft    chest    plank+stone     workbench  4
craft    boat     plank+fiber     workbench  4
craft    sword    ingot+wood      anvil      4
craft    ladder   plank+rope      anvil      5
craft    lantern  ingot+brick     anvil      5
craft    pickaxe  ingot+plank     anvil      5
"""


def parse_recipes(text: str) -> RecipeGraph:
    gather: dict[str, str] = {}
    recipes: dict[str, Recipe] = {}
    declared: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        cols = line.split()
        if len(cols) != 5:
            raise RecipeError(f"line {lineno}: expected 5 columns, got {len(cols)}")
        kind, output, inputs, station, depth = cols
        try:
            declared[output] = int(depth)
        except ValueError:
            raise RecipeError(f"line {lineno}: depth {depth!r} is not an integer") from None
        if output in declared and (output in gather.values() or output in recipes):
            raise RecipeError(f"line {lineno}: duplicate output {output!r}")
        if kind == "gather":
            if inputs in gather:
                raise RecipeError(f"line {lineno}: resource {inputs!r} gathered twice")
            gather[inputs] = output
        elif kind == "craft":
            parts = []
            for tok in inputs.split("+"):
                name, _, count = tok.partition("*")
                parts.append((name, int(count) if count else 1))
            recipes[output] = Recipe(output, tuple(parts), station, len(recipes))
        else:
            raise RecipeError(f"line {lineno}: unknown kind {kind!r}")
    graph = RecipeGraph(gather, recipes)
    for item, d in declared.items():
        if graph.depth(item) != d:
            raise RecipeError(f"{item}: declared depth {d} but closure has {graph.depth(item)} items")
    return graph


def format_recipes(graph: RecipeGraph) -> str:
    lines = ["# kind   output   inputs          station    depth"]
    for res, item in graph.gatherables.items():
        lines.append(f"gather   {item:<8} {res:<15} -          {graph.depth(item)}")
    for rec in graph.recipes.values():
        ins = "+".join(i if n == 1 else f"{i}*{n}" for i, n in rec.inputs)
        lines.append(f"craft    {rec.output:<8} {ins:<15} {rec.station:<10} {graph.depth(rec.output)}")
    return "\n".join(lines) + "\n"


def load_recipes(path: str | Path | None = None) -> RecipeGraph:
    if path is None:
        return default_recipes()
    return parse_recipes(Path(path).read_text())


_DEFAULT: RecipeGraph | None = None


def default_recipes() -> RecipeGraph:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = parse_recipes(DEFAULT_RECIPES)
    return _DEFAULT
