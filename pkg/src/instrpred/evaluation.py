"""Closed-loop rollouts, success and language metrics, and the experiment grid."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import model as M
from . import numcore as nc
from .craftworld import (Observation, PlanningError, RecipeGraph, TaskSpec, Trajectory, WorldState,
                         default_recipes, generate_task, observe, oracle_rollout, split_tasks, step)
from .dataset import (EOS, PAD, ObsCodec, Vocabulary, build_vocab_from_trajectories, codec_for, collate,
                      drop_annotations, tokenize)
from .training import (TrainConfig, _decoder_rows, encode_batch, hierarchy_train, train)

CODE_VERSION = "instrpred-1"


class EmptyInputError(ValueError):
    pass


class CacheError(RuntimeError):
    pass


class LeakError(AssertionError):
    pass


# ---------------------------------------------------------------- metrics

def success_rate(results: Sequence["EpisodeResult"]) -> float:
    if not results:
        raise EmptyInputError("success_rate of no episodes")
    return sum(bool(r.success) for r in results) / len(results)


def token_accuracy(predicted, target, pad_id: int = PAD) -> float:
    """Exact-match fraction over positions where ``target`` is not ``pad_id``."""
    p = np.asarray(predicted).reshape(-1)
    t = np.asarray(target).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"prediction length {p.shape[0]} differs from target length {t.shape[0]}")
    keep = t != pad_id
    if not keep.any():
        raise EmptyInputError("no non-pad target positions")
    return float((p[keep] == t[keep]).mean())


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: Sequence, reference: Sequence, max_n: int = 4) -> float:
    """Sentence BLEU without smoothing.

    Orders that either side is too short to contain are skipped; the
    brevity penalty is ``exp(1 - r/h)`` when the hypothesis is shorter.
    """
    hyp, ref = list(hypothesis), list(reference)
    if not ref:
        raise EmptyInputError("BLEU needs a nonempty reference")
    if not hyp:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        if len(hyp) < n or len(ref) < n:
            continue
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        clipped = sum(min(c, r[g]) for g, c in h.items())
        if clipped == 0:
            return 0.0
        logs.append(math.log(clipped / sum(h.values())))
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(sum(logs) / len(logs))


@dataclass(frozen=True)
class DifficultyRow:
    difficulty_steps: int
    count: int
    successes: int

    @property
    def rate(self) -> float:
        return self.successes / self.count


def difficulty_breakdown(results: Sequence["EpisodeResult"]) -> list[DifficultyRow]:
    groups: dict[int, list[bool]] = {}
    for r in results:
        groups.setdefault(r.difficulty_steps, []).append(bool(r.success))
    return [DifficultyRow(d, len(v), sum(v)) for d, v in sorted(groups.items())]


# ---------------------------------------------------------------- rollouts

@dataclass
class EpisodeResult:
    task_key: tuple[str, int]
    success: bool
    steps: int
    instructions: list[str] = field(default_factory=list)
    difficulty_steps: int = 0
    seed: int = 0


class Policy(Protocol):
    def act(self, episodes: Sequence[int], histories: Sequence[list[Observation]],
            goals: Sequence[str]) -> np.ndarray: ...


class ReplayPolicy:
    """Replays fixed action lists (one per episode)."""

    def __init__(self, actions: Sequence[Sequence[int]]):
        self.actions = [list(a) for a in actions]

    def act(self, episodes, histories, goals):
        out = []
        for e, h in zip(episodes, histories):
            seq = self.actions[e]
            out.append(seq[len(h) - 1] if len(h) - 1 < len(seq) else 0)
        return np.asarray(out, dtype=np.int64)


class ModelPolicy:
    """Greedy policy over a trained encoder + action head (+ optional instruction readout)."""

    def __init__(self, params, mcfg: M.ModelConfig, vocab: Vocabulary, codec: ObsCodec,
                 ctx: M.Ctx = M.EVAL):
        self.params, self.mcfg, self.vocab, self.codec, self.ctx = params, mcfg, vocab, codec, ctx
        self._token_cache: dict[int, tuple[list, list[np.ndarray]]] = {}

    def _history_tokens(self, h: list[Observation]) -> list[np.ndarray]:
        # rollouts only ever append to a history, so earlier steps are encoded once
        entry = self._token_cache.get(id(h))
        if entry is None or entry[0] is not h or len(entry[1]) > len(h):
            entry = (h, [])
        rows = entry[1]
        rows.extend(self.codec.tokens(o) for o in h[len(rows):])
        return rows

    def _inputs(self, histories, goals):
        n = len(histories)
        T = max(len(h) for h in histories)
        obs = np.zeros((n, T, self.codec.slots), dtype=np.int64)
        mask = np.zeros((n, T), dtype=bool)
        cache = {}
        for i, h in enumerate(histories):
            rows = self._history_tokens(h)
            cache[id(h)] = (h, rows)
            obs[i, :len(h)] = np.stack(rows)
            mask[i, :len(h)] = True
        self._token_cache = cache
        gt = [tokenize(g, self.vocab) for g in goals]
        G = max(1, max(len(g) for g in gt))
        goal = np.full((n, G), PAD, dtype=np.int64)
        gmask = np.zeros((n, G), dtype=bool)
        for i, g in enumerate(gt):
            goal[i, :len(g)] = g
            gmask[i, :len(g)] = True
        return obs, mask, goal, gmask

    def encode(self, histories, goals, instr_block=None, block_mask=None) -> M.EncoderOutput:
        obs, mask, goal, gmask = self._inputs(histories, goals)
        with nc.no_grad():
            if self.mcfg.encoder == "state":
                last = obs[np.arange(len(histories)), mask.sum(axis=1) - 1]
                return M.encode_state(self.params, self.mcfg, last, goal, gmask, self.ctx)
            feats = self.codec.multi_hot(obs, mask)
            return M.encode_sequence(self.params, self.mcfg, feats, mask, goal, gmask, self.ctx,
                                     instr_block, block_mask)

    def _last_logits(self, enc: M.EncoderOutput, histories) -> np.ndarray:
        with nc.no_grad():
            logits = M.policy_logits(self.params, enc).data
        if self.mcfg.encoder == "state":
            return logits
        last = np.asarray([len(h) - 1 for h in histories])
        return logits[np.arange(len(histories)), last]

    def act(self, episodes, histories, goals):
        enc = self.encode(histories, goals)
        return self._last_logits(enc, histories).argmax(axis=-1)

    def describe(self, episodes, histories, goals) -> list[str]:
        """Greedy instruction readout from the latents up to the current step."""
        enc = self.encode(histories, goals)
        n = len(histories)
        if self.mcfg.encoder == "state":
            mem, idx = enc.tokens, np.arange(n)
            allow = np.ones((n, mem.shape[1]), dtype=bool)
            allow[:, 1 + self.mcfg.obs_slots:] = enc.goal_mask if self.mcfg.goal_in_cross else False
        else:
            mem, n_goal = M.sequence_memory(enc, self.mcfg.goal_in_cross)
            T = enc.latents.shape[1]
            t = np.asarray([len(h) for h in histories])
            allow = np.arange(1, T + 1)[None, :] <= t[:, None]
            if n_goal:
                allow = np.concatenate([enc.goal_mask, allow], axis=1)
            idx = np.arange(n)
        ids = M.greedy_decode(self.params, self.mcfg, mem, idx, allow, ctx=self.ctx)
        return [" ".join(self.vocab.itos[i] for i in row) for row in ids]


class HierarchyPolicy:
    """High level decodes the full plan each step; the low level acts on it.

    ``oracle_plans`` (one token list per episode) bypasses the high level.
    """

    def __init__(self, high, high_cfg, low, low_cfg, vocab, codec, oracle_plans=None,
                 replan_every: int = 1, ctx: M.Ctx = M.EVAL):
        self.high = ModelPolicy(high, high_cfg, vocab, codec, ctx)
        self.low = ModelPolicy(low, low_cfg, vocab, codec, ctx)
        self.oracle_plans = oracle_plans
        self.replan_every = replan_every
        self.plans: dict[int, list[int]] = {}

    def plan(self, episodes, histories, goals) -> list[list[int]]:
        if self.oracle_plans is not None:
            return [self.oracle_plans[e] for e in episodes]
        todo = [i for i, (e, h) in enumerate(zip(episodes, histories))
                if e not in self.plans or (len(h) - 1) % self.replan_every == 0]
        if todo:
            hs = [histories[i] for i in todo]
            enc = self.high.encode(hs, [goals[i] for i in todo])
            T = enc.latents.shape[1]
            allow = np.arange(1, T + 1)[None, :] <= np.asarray([len(h) for h in hs])[:, None]
            rows = M.greedy_decode(self.high.params, self.high.mcfg, enc.latents, np.arange(len(todo)),
                                   allow, ctx=self.high.ctx, eos_run=2)
            for i, row in zip(todo, rows):
                self.plans[episodes[i]] = (row + [EOS])[: self.low.mcfg.instr_block_len]
        return [self.plans[e] for e in episodes]

    def act(self, episodes, histories, goals):
        plans = self.plan(episodes, histories, goals)
        L = max(1, max(len(p) for p in plans))
        block = np.full((len(plans), L), PAD, dtype=np.int64)
        for i, p in enumerate(plans):
            block[i, :len(p)] = p
        enc = self.low.encode(histories, goals, block, block != PAD)
        return self.low._last_logits(enc, histories).argmax(axis=-1)


def rollout_batch(policy, tasks: Sequence[tuple[WorldState, TaskSpec]], max_steps: int | None = None,
                  decode_instructions: bool = False, observability: str = "full", window: int = 5,
                  recipes: RecipeGraph | None = None, allowed_keys: set | None = None) -> list[EpisodeResult]:
    """Run every episode in lockstep with greedy actions until success or the budget."""
    recipes = recipes or default_recipes()
    if allowed_keys is not None:
        for _, task in tasks:
            if task.key not in allowed_keys:
                raise LeakError(f"task {task.key} is not in the evaluation split")
    states = [s for s, _ in tasks]
    budgets = [s.max_steps if max_steps is None else max_steps for s in states]
    histories: list[list[Observation]] = [[] for _ in tasks]
    results = [EpisodeResult(t.key, False, 0, [], t.difficulty_steps, t.seed) for _, t in tasks]
    active = [i for i in range(len(tasks)) if budgets[i] > 0]
    while active:
        for i in active:
            histories[i].append(observe(states[i], observability, window, recipes))
        hs = [histories[i] for i in active]
        goals = [tasks[i][1].goal_text for i in active]
        if decode_instructions and hasattr(policy, "describe"):
            for i, text in zip(active, policy.describe(active, hs, goals)):
                if not results[i].instructions or results[i].instructions[-1] != text:
                    results[i].instructions.append(text)
        actions = policy.act(active, hs, goals)
        still = []
        for i, a in zip(active, actions):
            states[i], _, success = step(states[i], int(a), recipes)
            results[i].steps += 1
            if success:
                results[i].success = True
            elif results[i].steps < budgets[i]:
                still.append(i)
        active = still
    return results


def rollout_policy(policy, state: WorldState, task: TaskSpec, max_steps: int | None = None,
                   decode_instructions: bool = False, **kw) -> EpisodeResult:
    return rollout_batch(policy, [(state, task)], max_steps, decode_instructions, **kw)[0]


def evaluate_policy(policy, tasks, max_steps=None, batch_size: int = 50, **kw) -> list[EpisodeResult]:
    out = []
    for s in range(0, len(tasks), batch_size):
        out += rollout_batch(policy, tasks[s:s + batch_size], max_steps, **kw)
    return out


# ---------------------------------------------------------------- held-out language metrics

@dataclass(frozen=True)
class LanguageMetrics:
    token_accuracy: float
    bleu: float
    lang_nll: float


def language_metrics(params, mcfg: M.ModelConfig, dataset: Sequence[Trajectory], vocab: Vocabulary,
                     codec: ObsCodec, batch_size: int = 64, with_bleu: bool = True) -> LanguageMetrics:
    """Teacher-forced accuracy / NLL and greedy-decode BLEU on annotated demonstrations.

    The cross mask is always applied here, as it would be at test time,
    whatever the model was trained with.
    """
    cfg = replace(mcfg, cross_mask=True)
    tcfg = TrainConfig(objective="lang", lambda_lang=1.0, mask_mode=cfg.mask_mode,
                       observability=cfg.observability)
    data = [tr for tr in dataset if tr.annotated]
    if not data:
        raise EmptyInputError("no annotated demonstrations to score")
    preds, targets, bleus = [], [], []
    nll_sum, n_tok = 0.0, 0
    for s in range(0, len(data), batch_size):
        batch = collate(data[s:s + batch_size], vocab, codec, cfg.max_instr_len)
        with nc.no_grad():
            enc = encode_batch(params, cfg, batch, codec, M.EVAL)
            x_in, x_out, mem, idx, allow = _decoder_rows(cfg, tcfg, batch, enc, "lang")
            logits = M.decode_instruction_logits(params, cfg, x_in, mem, idx, allow)
            nll_sum += nc.cross_entropy_logits(logits, x_out, ignore_index=PAD, reduction="sum").item()
        n_tok += int((x_out != PAD).sum())
        preds.append(logits.data.argmax(axis=-1).reshape(-1))
        targets.append(x_out.reshape(-1))
        if with_bleu:
            hyps = M.greedy_decode(params, cfg, mem, idx, allow)
            for h, ref in zip(hyps, x_out):
                ref = [int(t) for t in ref if t not in (PAD, EOS)]
                bleus.append(bleu(h, ref))
    acc = token_accuracy(np.concatenate(preds), np.concatenate(targets), PAD)
    return LanguageMetrics(acc, float(np.mean(bleus)) if bleus else float("nan"), nll_sum / n_tok)


# ---------------------------------------------------------------- report

REPORT_FIELDS = ("cell", "config_hash", "objective", "demos", "annotation", "mask_mode", "cross_mask",
                 "seed", "episodes", "success", "token_accuracy", "bleu", "lang_nll", "per_difficulty")


class EmptyReportError(ValueError):
    pass


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: format_value(r.get(k)) for k in REPORT_FIELDS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({k: parse_value(k, r[k]) for k in REPORT_FIELDS})
        return cls(rows)

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]


_INT_FIELDS = {"demos", "seed", "episodes"}
_FLOAT_FIELDS = {"annotation", "success", "token_accuracy", "bleu", "lang_nll"}


def format_value(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, dict):
        return ";".join(f"{k}:{s}/{n}" for k, (s, n) in sorted(v.items()))
    return str(v)


def parse_value(key: str, text: str):
    if text == "n/a":
        return None
    if key in _INT_FIELDS:
        return int(text)
    if key in _FLOAT_FIELDS:
        return float(text)
    if key == "cross_mask":
        return text == "true"
    if key == "per_difficulty":
        out = {}
        for part in filter(None, text.split(";")):
            d, frac = part.split(":")
            s, n = frac.split("/")
            out[int(d)] = (int(s), int(n))
        return out
    return text


# ---------------------------------------------------------------- experiment grid

@dataclass
class ExperimentConfig:
    """Everything a grid shares: task pool, split, evaluation size and the base configs."""

    difficulties: tuple[int, ...] = (1, 2, 3)
    pool_seed: int = 0
    holdout_fraction: float = 0.25
    eval_episodes: int = 200
    eval_max_steps: int = 120
    grid_size: int = 7
    observability: str = "full"
    window: int = 5                 # observation window (partial observability)
    placement_window: int = 5       # generation keeps a needed resource outside this initial view
    lang_eval_demos: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)


@dataclass(frozen=True)
class GridCell:
    objective: str
    demos: int
    annotation: float
    seed: int
    cross_mask: bool = True
    mask_mode: str = "execution"

    @property
    def cell_id(self) -> str:
        m = "" if self.cross_mask else "-nomask"
        return f"{self.objective}{m}-{self.mask_mode}-n{self.demos}-a{self.annotation:g}-s{self.seed}"


@dataclass
class GridSpec:
    demos: list[int]
    annotation: list[float]
    objectives: list[str]
    seeds: list[int]
    cross_mask: list[bool] = field(default_factory=lambda: [True])
    mask_modes: list[str] = field(default_factory=lambda: ["execution"])

    def cells(self) -> list[GridCell]:
        return [GridCell(o, d, a, s, c, m) for o in self.objectives for c in self.cross_mask
                for m in self.mask_modes for d in self.demos for a in self.annotation for s in self.seeds]


@dataclass
class TaskPool:
    train_tasks: list[tuple[WorldState, TaskSpec]]
    train_demos: list[Trajectory]
    eval_tasks: list[tuple[WorldState, TaskSpec]]
    eval_demos: list[Trajectory]
    unseen_keys: set

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for _, t in self.train_tasks + self.eval_tasks:
            h.update(f"{t.seed}:{t.goal_item}:{t.difficulty_steps}:{t.layout_bucket};".encode())
        return h.hexdigest()[:16]


def build_pool(exp: ExperimentConfig, n_train: int) -> TaskPool:
    """Generate tasks until ``n_train`` seen and ``eval_episodes`` unseen ones exist."""
    recipes = default_recipes()
    diffs = exp.difficulties
    seen: list = []
    unseen: list = []
    # the split is drawn over every (goal, bucket) key the difficulties can produce
    keys = sorted({(g, b) for d in diffs for g in recipes.goals_at_depth(d) for b in range(4)})
    key_tasks = [TaskSpec(g, "", 0, 0, b) for g, b in keys]
    _, held = split_tasks(key_tasks, exp.holdout_fraction, exp.pool_seed)
    unseen_keys = {t.key for t in held}
    i = 0
    need_eval = max(exp.eval_episodes, exp.lang_eval_demos)
    while len(seen) < n_train or len(unseen) < need_eval:
        seed = exp.pool_seed * 1_000_003 + i
        d = diffs[i % len(diffs)]
        i += 1
        state, task = generate_task(seed, d, exp.grid_size, recipes, window=exp.placement_window)
        bucket = unseen if task.key in unseen_keys else seen
        limit = need_eval if bucket is unseen else n_train
        if len(bucket) < limit:
            bucket.append((state, task))
    demo = lambda st, t: oracle_rollout(st, t, observability=exp.observability, window=exp.window)
    train_demos = [demo(s, t) for s, t in seen]
    eval_demos = [demo(s, t) for s, t in unseen[: exp.lang_eval_demos]]
    return TaskPool(seen, train_demos, unseen[: exp.eval_episodes], eval_demos, unseen_keys)


def cell_configs(exp: ExperimentConfig, cell: GridCell) -> tuple[TrainConfig, M.ModelConfig]:
    objective = "lang" if cell.annotation > 0 and cell.objective == "lang" else cell.objective
    if cell.objective == "lang" and cell.annotation == 0:
        objective = "bc"
    tcfg = replace(exp.train, objective=objective, seed=cell.seed, mask_mode=cell.mask_mode,
                   observability=exp.observability)
    mcfg = replace(exp.model, cross_mask=cell.cross_mask, mask_mode=cell.mask_mode,
                   observability=exp.observability)
    return tcfg, mcfg


def cell_hash(exp: ExperimentConfig, cell: GridCell, fingerprint: str) -> str:
    tcfg, mcfg = cell_configs(exp, cell)
    payload = {"cell": asdict(cell), "train": asdict(tcfg), "model": asdict(mcfg),
               "exp": {k: v for k, v in asdict(exp).items() if k not in ("train", "model")},
               "data": fingerprint, "code": CODE_VERSION}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_cell(exp: ExperimentConfig, cell: GridCell, pool: TaskPool) -> dict:
    """Train and evaluate one grid cell; returns its report row."""
    tcfg, mcfg = cell_configs(exp, cell)
    data = pool.train_demos[: cell.demos]
    data = drop_annotations(data, cell.annotation, cell.seed)
    # one vocabulary per pool, so every cell reads the same token ids
    vocab, codec = build_vocab_from_trajectories(pool.train_demos), codec_for(pool.train_demos)
    ctx = M.Ctx(training=True, rng=np.random.default_rng([cell.seed, 777])) if tcfg.eval_dropout else M.EVAL
    acc = bl = nll = None
    if tcfg.objective == "hierarchy":
        res = hierarchy_train(tcfg, data, mcfg, vocab, codec)
        policy = HierarchyPolicy(res.high_params, res.high_config, res.low_params, res.low_config,
                                 res.vocab, res.codec, ctx=ctx)
    else:
        res = train(tcfg, data, mcfg, vocab, codec)
        policy = ModelPolicy(res.params, res.model_config, res.vocab, res.codec, ctx)
        if tcfg.objective == "lang":
            lm = language_metrics(res.params, res.model_config, pool.eval_demos, res.vocab, res.codec)
            acc, bl, nll = lm.token_accuracy, lm.bleu, lm.lang_nll
    results = evaluate_policy(policy, pool.eval_tasks, exp.eval_max_steps, observability=exp.observability,
                              window=exp.window, allowed_keys=pool.unseen_keys)
    per = {r.difficulty_steps: (r.successes, r.count) for r in difficulty_breakdown(results)}
    return {"cell": cell.cell_id, "config_hash": cell_hash(exp, cell, pool.fingerprint()),
            "objective": cell.objective, "demos": cell.demos, "annotation": float(cell.annotation),
            "mask_mode": cell.mask_mode, "cross_mask": cell.cross_mask, "seed": cell.seed,
            "episodes": len(results), "success": success_rate(results), "token_accuracy": acc,
            "bleu": bl, "lang_nll": nll, "per_difficulty": per}


def _canonical(row: dict) -> dict:
    """A row as it reads back from CSV (so cached and fresh rows compare equal)."""
    return {k: parse_value(k, format_value(row.get(k))) for k in REPORT_FIELDS}


def _run_cell_job(args):
    exp, cell, pool = args
    return _canonical(run_cell(exp, cell, pool))


def run_experiment_grid(grid: GridSpec, exp: ExperimentConfig, cache_dir: str | Path | None = None,
                        workers: int = 1, pool: TaskPool | None = None) -> EvalReport:
    """Train and evaluate every cell; cached cells with a matching config hash are reused.

    All cells share one task pool and one unseen-task list.  ``report.csv``
    under ``cache_dir`` gets one appended row per freshly completed cell.
    """
    cells = grid.cells()
    pool = pool or build_pool(exp, max(grid.demos))
    fp = pool.fingerprint()
    cache = Path(cache_dir) if cache_dir is not None else None
    rows: dict[str, dict] = {}
    todo = []
    for cell in cells:
        h = cell_hash(exp, cell, fp)
        if cache is not None:
            path = cache / "cells" / f"{cell.cell_id}.json"
            if path.exists():
                cached = json.loads(path.read_text())
                if cached["config_hash"] != h:
                    raise CacheError(f"cached cell {cell.cell_id} has config hash {cached['config_hash']}, "
                                     f"current configuration hashes to {h}")
                rows[cell.cell_id] = EvalReport.from_csv(cached["csv"]).rows[0]
                continue
        todo.append(cell)
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            fresh = list(ex.map(_run_cell_job, [(exp, c, pool) for c in todo]))
    else:
        fresh = (_run_cell_job((exp, c, pool)) for c in todo)
    for cell, row in zip(todo, fresh):
        rows[cell.cell_id] = row
        if cache is not None:
            (cache / "cells").mkdir(parents=True, exist_ok=True)
            text = EvalReport([row]).to_csv()
            tmp = cache / "cells" / f"{cell.cell_id}.json.tmp"
            tmp.write_text(json.dumps({"config_hash": row["config_hash"], "csv": text}))
            tmp.replace(cache / "cells" / f"{cell.cell_id}.json")
            report_path = cache / "report.csv"
            line = text.split("\n", 1)[1]
            with open(report_path, "a", encoding="utf-8") as fh:
                if fh.tell() == 0:
                    fh.write(text.split("\n", 1)[0] + "\n")
                fh.write(line)
    return EvalReport([rows[c.cell_id] for c in cells])
