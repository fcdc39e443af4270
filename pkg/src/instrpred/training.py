"""Joint behaviour-cloning / instruction-prediction objective and the comparison objectives.

Objectives
----------
``bc``               action NLL only
``lang``             action NLL + lambda * instruction NLL (interval-masked cross attention)
``forward``          the decoder predicts the remaining demonstrated actions from each segment onset
``goal_pred``        the decoder reconstructs the goal text from all latents
``hierarchy``        a plan-emitting high level feeding an instruction-conditioned low level
``probe_goal_only``  frozen encoder, decoder reads goal latents only
``probe_goal_obs``   frozen encoder, decoder reads goal and observation latents
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import model as M
from . import numcore as nc
from .craftworld import Trajectory
from .dataset import (BOS, EOS, IGNORE_ACTION, PAD, Batch, ObsCodec, Vocabulary, action_vocab,
                      batch_stream, build_vocab_from_trajectories, codec_for, collate, tokenize)
from .numcore import Tensor

OBJECTIVES = ("lang", "bc", "forward", "goal_pred", "hierarchy", "probe_goal_only", "probe_goal_obs")
METRIC_FIELDS = ("step", "total", "action_nll", "lang_nll", "grad_norm")


class TrainConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, checkpoint: Path | None):
        where = f"; last good parameters kept at {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    objective: str = "lang"
    lambda_lang: float = 0.25
    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-4
    epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip_norm: float = 0.0      # 0 disables clipping
    seed: int = 0
    mask_mode: str = "execution"
    observability: str = "full"
    raw_sum: bool = False            # sum instead of mean reduction of both loss terms
    checkpoint_every: int = 0
    eval_dropout: bool = False       # keep dropout active during evaluation rollouts
    plan_rows: int = 4               # hierarchy: timesteps sampled per trajectory for the high level

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise TrainConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.lambda_lang < 0 or not math.isfinite(self.lambda_lang):
            raise TrainConfigError(f"lambda_lang must be a finite value >= 0, got {self.lambda_lang}")
        if self.steps < 0:
            raise TrainConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise TrainConfigError("learning_rate and epsilon must be positive")
        if self.weight_decay < 0 or self.grad_clip_norm < 0:
            raise TrainConfigError("weight_decay and grad_clip_norm must be >= 0")
        if self.mask_mode not in M.MASK_MODES:
            raise TrainConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.observability not in ("full", "partial"):
            raise TrainConfigError(f"unknown observability {self.observability!r}")
        if self.plan_rows < 1:
            raise TrainConfigError("plan_rows must be >= 1")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.objective == "bc" else self.lambda_lang

    def adam_state(self) -> nc.AdamState:
        return nc.AdamState(learning_rate=self.learning_rate, epsilon=self.epsilon,
                            weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2,
                            grad_clip_norm=self.grad_clip_norm or None)


# Named presets: training fields plus the model fields they imply.
PRESETS: dict[str, dict[str, dict]] = {
    "babyai-like": {
        "train": dict(lambda_lang=0.7, batch_size=32, learning_rate=1e-4, epsilon=1e-8,
                      weight_decay=0.0, grad_clip_norm=0.0, eval_dropout=False),
        "model": dict(encoder_blocks=4, decoder_blocks=1, embed_dim=128, mlp_dim=256, dropout=0.0),
    },
    "crafting-like": {
        "train": dict(lambda_lang=0.25, batch_size=64, learning_rate=1e-4, epsilon=1e-8,
                      weight_decay=0.05, grad_clip_norm=1.0, eval_dropout=True),
        "model": dict(encoder_blocks=4, decoder_blocks=1, embed_dim=128, mlp_dim=256, dropout=0.1),
    },
}


def preset(name: str, **overrides) -> tuple[TrainConfig, M.ModelConfig]:
    """Materialise a named preset; ``overrides`` may name fields of either config."""
    if name not in PRESETS:
        raise TrainConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    tkeys = {f.name for f in fields(TrainConfig)}
    mkeys = {f.name for f in fields(M.ModelConfig)}
    t, m = dict(PRESETS[name]["train"]), dict(PRESETS[name]["model"])
    for k, v in overrides.items():
        if k in tkeys:
            t[k] = v
        elif k in mkeys:
            m[k] = v
        else:
            raise TrainConfigError(f"unknown config key {k!r}")
    return TrainConfig(**t), M.ModelConfig(**m)


# ---------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    action_nll: float
    lang_nll: float
    lam: float
    n_actions: int
    n_tokens: int
    loss: Tensor | None = field(default=None, repr=False)   # differentiable total

    @property
    def total(self) -> float:
        return self.action_nll + self.lam * self.lang_nll


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def joint_loss(action_logits, action_targets, decoder_logits, instruction_targets, lam: float,
               raw_sum: bool = False, action_ignore: int = IGNORE_ACTION, token_pad: int = PAD
               ) -> LossBreakdown:
    """Action NLL plus ``lam`` times decoder NLL.

    Each term is the mean over its contributing positions (or the sum when
    ``raw_sum``).  Pass ``decoder_logits=None`` when no row carries an
    annotation; the language term is then exactly zero and absent from the graph.
    """
    if lam < 0 or not math.isfinite(lam):
        raise TrainConfigError(f"lambda must be a finite value >= 0, got {lam}")
    red = "sum" if raw_sum else "mean"
    action_targets = np.asarray(action_targets)
    a = nc.cross_entropy_logits(_as_t(action_logits), action_targets, ignore_index=action_ignore, reduction=red)
    n_act = int((action_targets != action_ignore).sum())
    loss, lang, n_tok = a, 0.0, 0
    if decoder_logits is not None and lam > 0:
        instruction_targets = np.asarray(instruction_targets)
        n_tok = int((instruction_targets != token_pad).sum())
        if n_tok:
            l_term = nc.cross_entropy_logits(_as_t(decoder_logits), instruction_targets,
                                             ignore_index=token_pad, reduction=red)
            lang = l_term.item()
            loss = a + l_term * lam
    elif decoder_logits is not None:
        instruction_targets = np.asarray(instruction_targets)
        n_tok = int((instruction_targets != token_pad).sum())
        if n_tok:
            with nc.no_grad():
                lang = nc.cross_entropy_logits(_as_t(decoder_logits), instruction_targets,
                                               ignore_index=token_pad, reduction=red).item()
    return LossBreakdown(a.item(), lang, float(lam), n_act, n_tok, loss)


def forward_prediction_loss(action_logits, action_targets, decoder_logits, future_targets, lam: float,
                            raw_sum: bool = False) -> LossBreakdown:
    """Forward baseline: the language slot of :func:`joint_loss` scores future actions."""
    return joint_loss(action_logits, action_targets, decoder_logits, future_targets, lam, raw_sum)


def goal_prediction_loss(action_logits, action_targets, decoder_logits, goal_targets, lam: float,
                         raw_sum: bool = False) -> LossBreakdown:
    """Goal-prediction baseline: the language slot of :func:`joint_loss` scores the goal text."""
    return joint_loss(action_logits, action_targets, decoder_logits, goal_targets, lam, raw_sum)


def future_action_targets(actions: Sequence[int], start: int, max_len: int | None = None,
                          offset: int = len(action_vocab(0))) -> tuple[list[int], list[int]]:
    """Decoder input/target rows for the actions remaining from 1-based step ``start``.

    Actions are encoded over :func:`action_vocab` (action ``a`` -> ``a + offset``).
    """
    ids = [int(a) + offset for a in actions[start - 1:]]
    if max_len is not None:
        ids = ids[: max_len - 1]
    return [BOS] + ids, ids + [EOS]


def plan_tokens(tr: Trajectory, vocab: Vocabulary) -> list[int]:
    """``seg_1 EOS seg_2 EOS ... seg_n EOS``: the low level's instruction block."""
    out: list[int] = []
    for seg in tr.segments:
        out += tokenize(seg.text, vocab) + [EOS]
    return out


def _pad_rows(rows: list[list[int]], pad: int = PAD) -> np.ndarray:
    L = max((len(r) for r in rows), default=1)
    out = np.full((len(rows), L), pad, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


# ---------------------------------------------------------------- model plumbing

def fit_model_config(mcfg: M.ModelConfig, vocab: Vocabulary, codec: ObsCodec, tcfg: TrainConfig,
                     plan_len: int = 0) -> M.ModelConfig:
    """Fill data-dependent sizes and the training-time mask/observability choices."""
    kw = dict(obs_slots=codec.slots, obs_vocab_size=codec.vocab_size, obs_feature_dim=codec.feature_dim,
              text_vocab_size=len(vocab), mask_mode=tcfg.mask_mode, observability=tcfg.observability)
    if tcfg.objective == "forward":
        kw["decoder_vocab_size"] = len(action_vocab(mcfg.action_count))
    if plan_len:
        kw["max_instr_len"] = max(mcfg.max_instr_len, plan_len)
    return replace(mcfg, **kw)


def encode_batch(params, mcfg: M.ModelConfig, batch: Batch, codec: ObsCodec, ctx: M.Ctx,
                 instr_block: np.ndarray | None = None, block_mask: np.ndarray | None = None
                 ) -> M.EncoderOutput:
    if mcfg.encoder == "state":
        flat = batch.obs[batch.step_mask]
        goal_rows = np.nonzero(batch.step_mask)[0]
        return M.encode_state(params, mcfg, flat, batch.goal[goal_rows], batch.goal_mask[goal_rows], ctx)
    feats = codec.multi_hot(batch.obs, batch.step_mask)
    return M.encode_sequence(params, mcfg, feats, batch.step_mask, batch.goal, batch.goal_mask, ctx,
                             instr_block, block_mask)


def _action_targets(mcfg: M.ModelConfig, batch: Batch) -> np.ndarray:
    return batch.actions[batch.step_mask] if mcfg.encoder == "state" else batch.actions


def _decoder_rows(mcfg: M.ModelConfig, tcfg: TrainConfig, batch: Batch, enc: M.EncoderOutput,
                  objective: str):
    """(tokens_in, targets, memory, mem_index, cross_allow) for the auxiliary decoder, or None."""
    lengths = batch.step_mask.sum(axis=1)
    T = batch.obs.shape[1]
    if objective == "goal_pred":
        rows_in = [[BOS] + g[m].tolist() for g, m in zip(batch.goal, batch.goal_mask)]
        rows_out = [g[m].tolist() + [EOS] for g, m in zip(batch.goal, batch.goal_mask)]
        if mcfg.encoder == "state":
            # one row per trajectory, reading its first observation's latents
            first = np.concatenate([[0], np.cumsum(lengths)[:-1]])
            allow = np.ones((len(first), enc.tokens.shape[1]), dtype=bool)
            allow[:, 1 + mcfg.obs_slots:] = batch.goal_mask
            return _pad_rows(rows_in), _pad_rows(rows_out), enc.tokens, first, allow
        mem, n_goal = M.sequence_memory(enc, mcfg.goal_in_cross)
        obs_allow = np.arange(1, T + 1)[None, :] <= lengths[:, None]
        allow = np.concatenate([batch.goal_mask, obs_allow], axis=1) if n_goal else obs_allow
        return _pad_rows(rows_in), _pad_rows(rows_out), mem, np.arange(batch.size), allow
    if len(batch.instr_row) == 0:
        return None
    if objective == "forward":
        rows = [future_action_targets(batch.trajectories[b].actions, int(s), mcfg.max_instr_len)
                for b, (s, _) in zip(batch.instr_row, batch.instr_interval)]
        x_in, x_out = _pad_rows([r[0] for r in rows]), _pad_rows([r[1] for r in rows])
    else:
        x_in, x_out = batch.instr_in, batch.instr_out
    if mcfg.encoder == "state":
        return _state_rows(mcfg, batch, enc, x_in, x_out)
    mem, n_goal = M.sequence_memory(enc, mcfg.goal_in_cross)
    goal_rows = batch.goal_mask[batch.instr_row] if n_goal else None
    allow = M.sequence_cross_allow(batch.instr_interval, lengths[batch.instr_row], T, mcfg, goal_rows)
    return x_in, x_out, mem, batch.instr_row, allow


def _state_rows(mcfg, batch, enc, x_in, x_out):
    """Markovian supervision: every timestep predicts the instruction active at that step."""
    lengths = batch.step_mask.sum(axis=1)
    first = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    rows, idx = [], []
    for r, (b, (s, e)) in enumerate(zip(batch.instr_row, batch.instr_interval)):
        for t in range(s, e):
            rows.append(r)
            idx.append(first[b] + t - 1)
    rows, idx = np.asarray(rows), np.asarray(idx)
    n_tok = enc.tokens.shape[1]
    allow = np.ones((len(idx), n_tok), dtype=bool)
    goal_rows = batch.goal_mask[np.repeat(np.arange(batch.size), lengths)][idx]
    allow[:, 1 + mcfg.obs_slots:] = goal_rows if mcfg.goal_in_cross else False
    return x_in[rows], x_out[rows], enc.tokens, idx, allow


def compute_loss(params, mcfg: M.ModelConfig, tcfg: TrainConfig, batch: Batch, codec: ObsCodec,
                 ctx: M.Ctx = M.EVAL) -> LossBreakdown:
    """Loss of one batch under ``tcfg.objective`` (bc / lang / forward / goal_pred)."""
    lam = tcfg.effective_lambda
    enc = encode_batch(params, mcfg, batch, codec, ctx)
    logits = M.policy_logits(params, enc)
    targets = _action_targets(mcfg, batch)
    dec_logits = dec_targets = None
    if lam > 0 and tcfg.objective in ("lang", "forward", "goal_pred"):
        rows = _decoder_rows(mcfg, tcfg, batch, enc, tcfg.objective)
        if rows is not None:
            x_in, dec_targets, mem, mem_index, allow = rows
            dec_logits = M.decode_instruction_logits(params, mcfg, x_in, mem, mem_index, allow, ctx)
    return joint_loss(logits, targets, dec_logits, dec_targets, lam, tcfg.raw_sum)


# ---------------------------------------------------------------- optimisation loop

@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[dict]
    model_config: M.ModelConfig
    vocab: Vocabulary
    codec: ObsCodec

    def __iter__(self):
        return iter((self.params, self.history))


def _write_metrics(path: Path, rows: list[dict]) -> None:
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerows(rows)


def optimise(params: dict[str, Tensor], loss_fn: Callable[[dict, M.Ctx], LossBreakdown],
             tcfg: TrainConfig, trainable: Sequence[str] | None = None, out_dir: str | Path | None = None,
             tag: str = "checkpoint") -> list[dict]:
    """Run ``tcfg.steps`` Adam updates of ``params`` (in place) on ``loss_fn``.

    ``loss_fn(params, ctx)`` draws its own next batch.  Parameters outside
    ``trainable`` never change.  Metrics go to ``metrics.csv`` under ``out_dir``.
    """
    names = list(params) if trainable is None else list(trainable)
    opt = tcfg.adam_state()
    ctx = M.Ctx(training=True, rng=np.random.default_rng([tcfg.seed, 55441]))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_ckpt: Path | None = None
    history: list[dict] = []
    pending: list[dict] = []
    for step in range(1, tcfg.steps + 1):
        with nc.GradientTape() as tape:
            lb = loss_fn(params, ctx)
        if not math.isfinite(lb.total):
            if out is not None and last_ckpt is None:
                last_ckpt = out / f"{tag}-last-good.ipck"
                nc.checkpoint.save(last_ckpt, M.params_to_arrays(params))
            if out is not None:
                _write_metrics(out / "metrics.csv", pending)
            raise NonFiniteLossError(step, last_ckpt)
        nc.backward(lb.loss, tape)
        grads = {k: params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data)
                 for k in names}
        for k in names:
            params[k].grad = None
        norm = nc.adam_step({k: params[k] for k in names}, grads, opt)
        row = {"step": step, "total": lb.total, "action_nll": lb.action_nll,
               "lang_nll": lb.lang_nll, "grad_norm": norm}
        history.append(row)
        pending.append(row)
        if out is not None and tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            last_ckpt = out / f"{tag}-{step}.ipck"
            nc.checkpoint.save(last_ckpt, M.params_to_arrays(params))
            _write_metrics(out / "metrics.csv", pending)
            pending = []
    if out is not None:
        _write_metrics(out / "metrics.csv", pending)
        nc.checkpoint.save(out / f"{tag}.ipck", M.params_to_arrays(params))
    return history


def _prepare(dataset: Sequence[Trajectory], vocab: Vocabulary | None, codec: ObsCodec | None):
    if not dataset:
        raise TrainConfigError("training dataset is empty")
    return vocab or build_vocab_from_trajectories(dataset), codec or codec_for(dataset)


def train(config: TrainConfig, dataset: Sequence[Trajectory], model_config: M.ModelConfig,
          vocab: Vocabulary | None = None, codec: ObsCodec | None = None,
          out_dir: str | Path | None = None, params: dict[str, Tensor] | None = None) -> TrainResult:
    """Train a policy (plus auxiliary decoder) under ``config.objective``."""
    if config.objective == "hierarchy":
        raise TrainConfigError("use hierarchy_train for the hierarchy objective")
    if config.objective.startswith("probe"):
        raise TrainConfigError("use probe_train for the probe objectives")
    vocab, codec = _prepare(dataset, vocab, codec)
    mcfg = fit_model_config(model_config, vocab, codec, config)
    if params is None:
        params = M.init_params(mcfg, config.seed)
    stream = batch_stream(dataset, config.batch_size, config.seed, vocab, codec, mcfg.max_instr_len)

    def loss_fn(p, ctx):
        return compute_loss(p, mcfg, config, next(stream), codec, ctx)

    history = optimise(params, loss_fn, config, out_dir=out_dir)
    return TrainResult(params, history, mcfg, vocab, codec)


# ---------------------------------------------------------------- hierarchy

@dataclass
class HierarchyResult:
    high_params: dict[str, Tensor]
    low_params: dict[str, Tensor]
    high_config: M.ModelConfig
    low_config: M.ModelConfig
    history_high: list[dict]
    history_low: list[dict]
    vocab: Vocabulary
    codec: ObsCodec

    def __iter__(self):
        return iter((self.high_params, self.low_params))


def plan_block(trajectories: Sequence[Trajectory], vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    rows = [plan_tokens(tr, vocab)[:max_len] for tr in trajectories]
    block = _pad_rows(rows)
    return block, block != PAD


def plan_loss(params, mcfg: M.ModelConfig, batch: Batch, codec: ObsCodec, vocab: Vocabulary,
              rows_per_traj: int, rng: np.random.Generator, ctx: M.Ctx, raw_sum: bool = False) -> LossBreakdown:
    """High-level NLL of the whole EOS-separated plan, from latents up to sampled steps."""
    enc = encode_batch(params, mcfg, batch, codec, ctx)
    lengths = batch.step_mask.sum(axis=1)
    T = batch.obs.shape[1]
    plans = [plan_tokens(tr, vocab)[: mcfg.max_instr_len - 2] for tr in batch.trajectories]
    rows_b, rows_t = [], []
    for b, n in enumerate(lengths):
        k = min(rows_per_traj, int(n))
        for t in np.sort(rng.choice(int(n), size=k, replace=False)) + 1:
            rows_b.append(b)
            rows_t.append(t)
    rows_b = np.asarray(rows_b)
    x_in = _pad_rows([[BOS] + plans[b] + [EOS] for b in rows_b])
    x_out = _pad_rows([plans[b] + [EOS, EOS] for b in rows_b])
    allow = np.arange(1, T + 1)[None, :] <= np.asarray(rows_t)[:, None]
    logits = M.decode_instruction_logits(params, mcfg, x_in, enc.latents, rows_b, allow, ctx)
    red = "sum" if raw_sum else "mean"
    term = nc.cross_entropy_logits(logits, x_out, ignore_index=PAD, reduction=red)
    return LossBreakdown(0.0, term.item(), 1.0, 0, int((x_out != PAD).sum()), term)


def hierarchy_train(config: TrainConfig, dataset: Sequence[Trajectory], model_config: M.ModelConfig,
                    vocab: Vocabulary | None = None, codec: ObsCodec | None = None,
                    out_dir: str | Path | None = None) -> HierarchyResult:
    """Train the plan-emitting high level and the plan-conditioned low level."""
    if any(not tr.annotated for tr in dataset):
        raise TrainConfigError("hierarchy training needs every trajectory annotated")
    vocab, codec = _prepare(dataset, vocab, codec)
    plan_len = max(len(plan_tokens(tr, vocab)) for tr in dataset) + 2
    base = fit_model_config(model_config, vocab, codec, replace(config, objective="lang"), plan_len)
    high_cfg = base
    low_cfg = replace(base, instr_block_len=plan_len)
    out = Path(out_dir) if out_dir is not None else None

    high = M.init_params(high_cfg, config.seed)
    hstream = batch_stream(dataset, config.batch_size, config.seed, vocab, codec, high_cfg.max_instr_len)
    row_rng = np.random.default_rng([config.seed, 4111])

    def high_loss(p, ctx):
        return plan_loss(p, high_cfg, next(hstream), codec, vocab, config.plan_rows, row_rng, ctx, config.raw_sum)

    hist_high = optimise(high, high_loss, config, out_dir=out and out / "high")

    low = M.init_params(low_cfg, config.seed + 1)
    lstream = batch_stream(dataset, config.batch_size, config.seed, vocab, codec, low_cfg.max_instr_len)
    bc = replace(config, objective="bc")

    def low_loss(p, ctx):
        batch = next(lstream)
        block, mask = plan_block(batch.trajectories, vocab, low_cfg.instr_block_len)
        enc = encode_batch(p, low_cfg, batch, codec, ctx, block, mask)
        return joint_loss(M.policy_logits(p, enc), batch.actions, None, None, 0.0, bc.raw_sum)

    hist_low = optimise(low, low_loss, bc, out_dir=out and out / "low")
    return HierarchyResult(high, low, high_cfg, low_cfg, hist_high, hist_low, vocab, codec)


# ---------------------------------------------------------------- probe

@dataclass
class ProbeResult:
    accuracy: float
    params: dict[str, Tensor]
    model_config: M.ModelConfig
    history: list[dict]


def _probe_rows(params, mcfg, batch: Batch, codec: ObsCodec, with_observations: bool):
    """Frozen-encoder memory and cross mask for the probe decoder."""
    with nc.no_grad():
        enc = encode_batch(params, mcfg, batch, codec, M.EVAL)
    mem = nc.concat([enc.prefix, enc.latents], axis=1).detach()
    goal_rows = batch.goal_mask[batch.instr_row]
    lengths = batch.step_mask.sum(axis=1)[batch.instr_row]
    allow = M.sequence_cross_allow(batch.instr_interval, lengths, batch.obs.shape[1], mcfg, goal_rows,
                                   include_obs=with_observations)
    return mem, allow


def probe_train(config: TrainConfig, dataset: Sequence[Trajectory], with_observations: bool,
                model_config: M.ModelConfig, val_dataset: Sequence[Trajectory],
                encoder_params: dict[str, Tensor] | None = None, vocab: Vocabulary | None = None,
                codec: ObsCodec | None = None) -> ProbeResult:
    """Train only the instruction decoder over a frozen encoder; report validation token accuracy.

    With ``with_observations`` false the decoder cross-attends goal latents
    only; otherwise goal latents plus the interval-masked step latents.
    """
    vocab, codec = _prepare(dataset, vocab, codec)
    mcfg = fit_model_config(replace(model_config, encoder="sequence"), vocab, codec, config)
    params = M.init_params(mcfg, config.seed)
    if encoder_params is not None:
        for k, v in encoder_params.items():
            if not k.startswith("dec."):
                params[k] = Tensor(v.data.copy(), requires_grad=True, name=k)
    trainable = [k for k in params if k.startswith("dec.")]
    annotated = [tr for tr in dataset if tr.annotated]
    if not annotated:
        raise TrainConfigError("probe needs annotated trajectories")
    stream = batch_stream(annotated, config.batch_size, config.seed, vocab, codec, mcfg.max_instr_len)

    def loss_fn(p, ctx):
        batch = next(stream)
        mem, allow = _probe_rows(p, mcfg, batch, codec, with_observations)
        logits = M.decode_instruction_logits(p, mcfg, batch.instr_in, mem, batch.instr_row, allow, ctx)
        term = nc.cross_entropy_logits(logits, batch.instr_out, ignore_index=PAD)
        return LossBreakdown(0.0, term.item(), 1.0, 0, int((batch.instr_out != PAD).sum()), term)

    history = optimise(params, loss_fn, config, trainable=trainable)
    acc = probe_accuracy(params, mcfg, val_dataset, vocab, codec, with_observations)
    return ProbeResult(acc, params, mcfg, history)


def probe_accuracy(params, mcfg: M.ModelConfig, dataset: Sequence[Trajectory], vocab: Vocabulary,
                   codec: ObsCodec, with_observations: bool, batch_size: int = 64) -> float:
    from .evaluation import token_accuracy

    annotated = [tr for tr in dataset if tr.annotated]
    preds, targets = [], []
    for s in range(0, len(annotated), batch_size):
        batch = collate(annotated[s:s + batch_size], vocab, codec, mcfg.max_instr_len)
        mem, allow = _probe_rows(params, mcfg, batch, codec, with_observations)
        with nc.no_grad():
            logits = M.decode_instruction_logits(params, mcfg, batch.instr_in, mem, batch.instr_row, allow)
        pred = logits.data.argmax(axis=-1)
        preds.append(pred.reshape(-1))
        targets.append(batch.instr_out.reshape(-1))
    return token_accuracy(np.concatenate(preds), np.concatenate(targets), PAD)
