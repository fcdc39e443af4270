"""Vocabulary, tokenisation, trajectory files and padded batches."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .craftworld import SYMBOLS, InstructionSegment, Observation, Trajectory, WorldState

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
IGNORE_ACTION = -1
INV_LEVELS = 4  # inventory counts are bucketed as 0, 1, 2, 3+


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def normalize(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(texts: Iterable[str]) -> Vocabulary:
    words = set()
    for t in texts:
        words.update(normalize(t))
    return Vocabulary(list(RESERVED) + sorted(words - set(RESERVED)))


def corpus_texts(trajectories: Iterable[Trajectory]) -> Iterator[str]:
    for tr in trajectories:
        yield tr.goal_text
        for seg in tr.segments:
            yield seg.text


def build_vocab_from_trajectories(trajectories: Iterable[Trajectory]) -> Vocabulary:
    return build_vocab(corpus_texts(trajectories))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in normalize(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


def action_vocab(action_count: int) -> Vocabulary:
    """Decoder vocabulary over actions (forward-prediction objective): action ``a`` -> id ``a + 4``."""
    return Vocabulary(list(RESERVED) + [f"a{i}" for i in range(action_count)])


# ---------------------------------------------------------------- observation tokens

@dataclass(frozen=True)
class ObsCodec:
    """Maps an :class:`Observation` to per-slot token ids.

    Cell slots carry ``symbol`` or ``symbol + n_symbols`` when the agent
    stands there; inventory slots carry ``2 * n_symbols + 4 * item + min(count, 3)``.
    """

    n_cells: int
    n_items: int
    n_symbols: int = len(SYMBOLS)

    @property
    def slots(self) -> int:
        return self.n_cells + self.n_items

    @property
    def vocab_size(self) -> int:
        return 2 * self.n_symbols + INV_LEVELS * self.n_items

    @property
    def feature_dim(self) -> int:
        """Width of the per-step multi-hot used by the sequence encoder."""
        return self.n_cells * 2 * self.n_symbols + INV_LEVELS * self.n_items

    def tokens(self, obs: Observation) -> np.ndarray:
        cells = np.asarray(obs.cells, dtype=np.int64)
        if cells.shape[0] != self.n_cells:
            raise ValueError(f"observation has {cells.shape[0]} cells, codec expects {self.n_cells}")
        if obs.agent >= 0:
            cells = cells.copy()
            cells[obs.agent] += self.n_symbols
        elif self.n_cells % 2 == 1:
            cells = cells.copy()
            cells[self.n_cells // 2] += self.n_symbols
        inv = np.minimum(np.asarray(obs.inventory, dtype=np.int64), INV_LEVELS - 1)
        inv = 2 * self.n_symbols + INV_LEVELS * np.arange(self.n_items) + inv
        return np.concatenate([cells, inv])

    def feature_offsets(self) -> np.ndarray:
        cell = np.arange(self.n_cells) * 2 * self.n_symbols
        inv = np.full(self.n_items, self.n_cells * 2 * self.n_symbols - 2 * self.n_symbols)
        return np.concatenate([cell, inv])

    def multi_hot(self, tokens: np.ndarray, valid: np.ndarray | None = None, dtype=np.float32) -> np.ndarray:
        """``tokens[..., slots]`` -> dense ``[..., feature_dim]`` indicator array."""
        lead = tokens.shape[:-1]
        idx = tokens + self.feature_offsets()
        out = np.zeros((int(np.prod(lead, dtype=np.int64)), self.feature_dim), dtype=dtype)
        rows = np.repeat(np.arange(out.shape[0]), self.slots)
        out[rows, idx.reshape(-1)] = 1.0
        out = out.reshape(lead + (self.feature_dim,))
        if valid is not None:
            out *= valid[..., None]
        return out


def codec_for(trajectories: Sequence[Trajectory]) -> ObsCodec:
    obs = trajectories[0].observations[0]
    return ObsCodec(len(obs.cells), len(obs.inventory))


# ---------------------------------------------------------------- serialisation

def trajectory_to_record(tr: Trajectory) -> dict:
    rec = {
        "seed": tr.seed,
        "goal_text": tr.goal_text,
        "goal_item": tr.goal_item,
        "difficulty_steps": tr.difficulty_steps,
        "layout_bucket": tr.layout_bucket,
        "success": tr.success,
        "observations": [o.to_text() for o in tr.observations],
        "actions": list(map(int, tr.actions)),
        "segments": [{"text": s.text, "start": s.start, "end": s.end} for s in tr.segments],
    }
    if tr.initial is not None:
        st: WorldState = tr.initial
        rec["initial"] = {"grid": list(st.grid), "agent": list(st.agent), "goal_item": st.goal_item,
                          "rng_seed": st.rng_seed, "max_steps": st.max_steps,
                          "inventory": [list(p) for p in st.inventory]}
    return rec


def trajectory_from_record(rec: dict) -> Trajectory:
    initial = None
    if "initial" in rec:
        i = rec["initial"]
        initial = WorldState(tuple(i["grid"]), tuple(i["agent"]),
                             tuple((k, n) for k, n in i["inventory"]), i["goal_item"],
                             i["rng_seed"], 0, i["max_steps"])
    return Trajectory(
        observations=[Observation.from_text(o) for o in rec["observations"]],
        actions=list(rec["actions"]),
        goal_text=rec["goal_text"],
        segments=[InstructionSegment(s["text"], s["start"], s["end"]) for s in rec["segments"]],
        success=rec["success"],
        seed=rec["seed"],
        difficulty_steps=rec.get("difficulty_steps", 0),
        goal_item=rec.get("goal_item", ""),
        layout_bucket=rec.get("layout_bucket", 0),
        initial=initial,
    )


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajectories:
            fh.write(json.dumps(trajectory_to_record(tr), separators=(",", ":")) + "\n")


def read_trajectories(path: str | Path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [trajectory_from_record(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- annotation dropping

def drop_annotations(dataset: Sequence[Trajectory], keep_fraction: float, seed: int) -> list[Trajectory]:
    """Strip instruction segments from all but ``round(keep_fraction * n)`` trajectories."""
    if not 0.0 <= keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in [0, 1], got {keep_fraction}")
    n = len(dataset)
    keep = math.floor(keep_fraction * n + 0.5)
    chosen = set(np.random.default_rng([seed, 104729]).permutation(n)[:keep].tolist())
    return [tr if i in chosen else replace(tr, segments=[]) for i, tr in enumerate(dataset)]


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    obs: np.ndarray            # [B, T, slots] int
    step_mask: np.ndarray      # [B, T] bool
    actions: np.ndarray        # [B, T] int, IGNORE_ACTION at pads
    goal: np.ndarray           # [B, G] int, PAD at pads
    goal_mask: np.ndarray      # [B, G] bool
    instr_in: np.ndarray       # [R, L] BOS-prefixed instruction tokens
    instr_out: np.ndarray      # [R, L] next-token targets, EOS-terminated, PAD at pads
    instr_row: np.ndarray      # [R] owning trajectory index within the batch
    instr_interval: np.ndarray  # [R, 2] 1-based half-open [start, end)
    annotated: np.ndarray      # [B] bool
    trajectories: list[Trajectory]

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def encode_instruction(text: str, vocab: Vocabulary, max_len: int | None = None) -> tuple[list[int], list[int]]:
    ids = tokenize(text, vocab)
    if max_len is not None:
        ids = ids[: max_len - 1]
    return [BOS] + ids, ids + [EOS]


def collate(trajectories: Sequence[Trajectory], vocab: Vocabulary, codec: ObsCodec,
            max_instr_len: int | None = None) -> Batch:
    B = len(trajectories)
    T = max(tr.length for tr in trajectories)
    goals = [tokenize(tr.goal_text, vocab) for tr in trajectories]
    G = max(1, max(len(g) for g in goals))
    obs = np.zeros((B, T, codec.slots), dtype=np.int64)
    step_mask = np.zeros((B, T), dtype=bool)
    actions = np.full((B, T), IGNORE_ACTION, dtype=np.int64)
    goal = np.full((B, G), PAD, dtype=np.int64)
    goal_mask = np.zeros((B, G), dtype=bool)
    rows_in, rows_out, rows_b, rows_iv = [], [], [], []
    for b, tr in enumerate(trajectories):
        n = tr.length
        obs[b, :n] = np.stack([codec.tokens(o) for o in tr.observations])
        step_mask[b, :n] = True
        actions[b, :n] = tr.actions
        goal[b, :len(goals[b])] = goals[b]
        goal_mask[b, :len(goals[b])] = True
        for seg in tr.segments:
            x_in, x_out = encode_instruction(seg.text, vocab, max_instr_len)
            rows_in.append(x_in)
            rows_out.append(x_out)
            rows_b.append(b)
            rows_iv.append((seg.start, seg.end))
    L = max((len(r) for r in rows_in), default=1)
    R = len(rows_in)
    instr_in = np.full((R, L), PAD, dtype=np.int64)
    instr_out = np.full((R, L), PAD, dtype=np.int64)
    for r, (xi, xo) in enumerate(zip(rows_in, rows_out)):
        instr_in[r, :len(xi)] = xi
        instr_out[r, :len(xo)] = xo
    return Batch(
        obs=obs, step_mask=step_mask, actions=actions, goal=goal, goal_mask=goal_mask,
        instr_in=instr_in, instr_out=instr_out,
        instr_row=np.asarray(rows_b, dtype=np.int64),
        instr_interval=np.asarray(rows_iv, dtype=np.int64).reshape(R, 2),
        annotated=np.array([tr.annotated for tr in trajectories], dtype=bool),
        trajectories=list(trajectories),
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 31337]).permutation(n)


def make_batches(dataset: Sequence[Trajectory], batch_size: int, seed: int, vocab: Vocabulary,
                 codec: ObsCodec, epoch: int = 0, max_instr_len: int | None = None) -> list[Batch]:
    """One epoch of padded batches in a (seed, epoch)-determined shuffled order."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(dataset), seed, epoch)
    return [collate([dataset[i] for i in order[s:s + batch_size]], vocab, codec, max_instr_len)
            for s in range(0, len(order), batch_size)]


def batch_stream(dataset: Sequence[Trajectory], batch_size: int, seed: int, vocab: Vocabulary,
                 codec: ObsCodec, max_instr_len: int | None = None) -> Iterator[Batch]:
    """Endless stream of batches, epoch after epoch."""
    epoch = 0
    while True:
        order = epoch_order(len(dataset), seed, epoch)
        for s in range(0, len(order), batch_size):
            yield collate([dataset[i] for i in order[s:s + batch_size]], vocab, codec, max_instr_len)
        epoch += 1
