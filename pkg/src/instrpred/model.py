"""Transformer policy with an instruction decoder.

Two encoders share one interface:

* ``sequence`` — GPT-style causal encoder over ``[goal tokens, o_1 .. o_T]``;
  each step's observation enters as one token (multi-hot features times a
  projection).  Latent ``z_t`` sees the goal and ``o_1 .. o_t`` only.
* ``state`` — ViT-style encoder over ``[CLS, cell/inventory tokens, goal tokens]``
  of a single observation with unmasked attention; the policy reads ``z_CLS``.

The decoder is a causal transformer over instruction tokens that
cross-attends encoder latents through a per-instruction allow mask.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class ModelConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class ShapeError(ValueError):
    pass


MASK_MODES = ("execution", "onset")


@dataclass
class ModelConfig:
    encoder: str = "sequence"             # sequence | state
    encoder_blocks: int = 4
    decoder_blocks: int = 1
    embed_dim: int = 128
    mlp_dim: int = 256
    heads: int = 4
    dropout: float = 0.0
    max_seq_len: int = 128
    max_goal_len: int = 8
    max_instr_len: int = 16
    obs_slots: int = 66
    obs_vocab_size: int = 86
    obs_feature_dim: int = 950
    text_vocab_size: int = 64
    decoder_vocab_size: int = 0           # 0 -> same as text_vocab_size
    action_count: int = 5
    observability: str = "full"
    mask_mode: str = "execution"
    cross_mask: bool = True               # False: decoder may attend every latent
    goal_in_cross: bool = False
    instr_block_len: int = 0              # >0: encoder also reads an instruction block (hierarchy low level)

    def __post_init__(self):
        self.validate()

    @property
    def dec_vocab(self) -> int:
        return self.decoder_vocab_size or self.text_vocab_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ModelConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.encoder not in ("sequence", "state"):
            raise ModelConfigError(f"unknown encoder {self.encoder!r}")
        if self.mask_mode not in MASK_MODES:
            raise ModelConfigError(f"unknown mask_mode {self.mask_mode!r}")
        if self.observability not in ("full", "partial"):
            raise ModelConfigError(f"unknown observability {self.observability!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("encoder_blocks", "embed_dim", "mlp_dim", "heads", "max_seq_len", "max_goal_len",
                     "max_instr_len", "obs_slots", "obs_vocab_size", "text_vocab_size", "action_count"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if k not in types:
                raise ModelConfigError(f"unknown model config key {k!r}")
            kw[k] = _parse(v, types[k])
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(v: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ModelConfigError(f"not a boolean: {v!r}")
        return v.lower() in ("true", "1", "yes")
    if typ == "int":
        return int(v)
    if typ == "float":
        return float(v)
    return v


@dataclass
class Ctx:
    """Forward-pass mode: dropout is active only when ``training``."""

    training: bool = False
    rng: np.random.Generator | None = None


EVAL = Ctx()


# ---------------------------------------------------------------- parameters

def _block_shapes(prefix: str, E: int, M: int, cross: bool) -> dict[str, tuple]:
    s = {}
    attn_names = ("self", "cross") if cross else ("attn",)
    lns = ("ln1", "ln2", "ln3") if cross else ("ln1", "ln2")
    for ln in lns:
        s[f"{prefix}.{ln}.g"] = (E,)
        s[f"{prefix}.{ln}.b"] = (E,)
    for a in attn_names:
        for p in ("q", "k", "v", "o"):
            s[f"{prefix}.{a}.{p}.w"] = (E, E)
            s[f"{prefix}.{a}.{p}.b"] = (E,)
    s[f"{prefix}.mlp.fc.w"] = (E, M)
    s[f"{prefix}.mlp.fc.b"] = (M,)
    s[f"{prefix}.mlp.proj.w"] = (M, E)
    s[f"{prefix}.mlp.proj.b"] = (E,)
    return s


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    E, M = cfg.embed_dim, cfg.mlp_dim
    s: dict[str, tuple] = {}
    if cfg.encoder == "sequence":
        s["enc.obs.w"] = (cfg.obs_feature_dim, E)
        s["enc.obs.b"] = (E,)
        s["enc.time_pos"] = (cfg.max_seq_len, E)
    else:
        s["enc.obs_tok"] = (cfg.obs_vocab_size, E)
        s["enc.slot_pos"] = (cfg.obs_slots, E)
        s["enc.cls"] = (1, E)
    s["enc.goal_tok"] = (cfg.text_vocab_size, E)
    s["enc.goal_pos"] = (cfg.max_goal_len, E)
    if cfg.instr_block_len:
        s["enc.block_pos"] = (cfg.instr_block_len, E)
    for i in range(cfg.encoder_blocks):
        s.update(_block_shapes(f"enc.h{i}", E, M, cross=False))
    s["enc.ln_f.g"] = (E,)
    s["enc.ln_f.b"] = (E,)
    s["pi.w"] = (E, cfg.action_count)
    s["pi.b"] = (cfg.action_count,)
    V = cfg.dec_vocab
    s["dec.tok"] = (V, E)
    s["dec.pos"] = (cfg.max_instr_len, E)
    for i in range(cfg.decoder_blocks):
        s.update(_block_shapes(f"dec.h{i}", E, M, cross=True))
    s["dec.ln_f.g"] = (E,)
    s["dec.ln_f.b"] = (E,)
    s["dec.out.w"] = (E, V)
    s["dec.out.b"] = (V,)
    return s


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter total (independent of :func:`param_shapes`)."""
    E, M = cfg.embed_dim, cfg.mlp_dim
    enc_block = 2 * 2 * E + 4 * (E * E + E) + (E * M + M) + (M * E + E)
    dec_block = 3 * 2 * E + 8 * (E * E + E) + (E * M + M) + (M * E + E)
    if cfg.encoder == "sequence":
        inp = cfg.obs_feature_dim * E + E + cfg.max_seq_len * E
    else:
        inp = cfg.obs_vocab_size * E + cfg.obs_slots * E + E
    inp += (cfg.text_vocab_size + cfg.max_goal_len + cfg.instr_block_len) * E
    V = cfg.dec_vocab
    return (inp + cfg.encoder_blocks * enc_block + 2 * E + E * cfg.action_count + cfg.action_count
            + V * E + cfg.max_instr_len * E + cfg.decoder_blocks * dec_block + 2 * E + E * V + V)


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng([seed, 2718])
    params = {}
    for name, shape in param_shapes(cfg).items():
        last = name.rsplit(".", 1)[-1]
        if name.endswith(".g") and ".ln" in name:
            arr = np.ones(shape)
        elif last == "b" and len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def params_to_arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}


# ---------------------------------------------------------------- masks

def build_causal_mask(T: int) -> np.ndarray:
    if T < 1:
        raise EmptySequenceError("causal mask needs T >= 1")
    return np.tril(np.ones((T, T), dtype=bool))


def instruction_caps(intervals, mode: str = "execution") -> np.ndarray:
    """Last attendable latent (1-based) per instruction interval ``[start, end)``."""
    iv = np.asarray(intervals, dtype=np.int64).reshape(-1, 2)
    if mode == "execution":
        return iv[:, 1] - 1
    if mode == "onset":
        return np.maximum(iv[:, 0] - 1, 1)
    raise ModelConfigError(f"unknown mask_mode {mode!r}")


def build_instruction_cross_mask(intervals, T: int, mode: str = "execution") -> np.ndarray:
    """``allow[i, t-1]`` is True iff instruction ``i`` may attend latent ``z_t``."""
    from .craftworld.trajectory import check_partition

    intervals = [tuple(map(int, iv)) for iv in intervals]
    check_partition(intervals, T)
    caps = instruction_caps(intervals, mode)
    return np.arange(1, T + 1)[None, :] <= caps[:, None]


# ---------------------------------------------------------------- layers

def _linear(p: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return x @ p[name + ".w"] + p[name + ".b"]


def _ln(p, name, x):
    return nc.layer_norm(x, p[name + ".g"], p[name + ".b"], 1e-5)


def _split_heads(x: Tensor, H: int) -> Tensor:
    *lead, N, E = x.shape
    return x.reshape(*lead, N, H, E // H).transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, N, D = x.shape
    nl = len(lead)
    return x.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, N, H * D)


def attention(p, name: str, xq: Tensor, xkv: Tensor, allow: np.ndarray, H: int,
              kv_index: np.ndarray | None = None) -> Tensor:
    """Multi-head attention; ``allow`` broadcasts to ``[B, H, Nq, Nk]``.

    ``kv_index`` gathers key/value rows (computed once per memory item) for each query row.
    """
    q = _split_heads(_linear(p, name + ".q", xq), H)
    k = _split_heads(_linear(p, name + ".k", xkv), H)
    v = _split_heads(_linear(p, name + ".v", xkv), H)
    if kv_index is not None:
        k = k[kv_index]
        v = v[kv_index]
    D = q.shape[-1]
    nd = k.ndim
    scores = (q @ k.transpose(*range(nd - 2), nd - 1, nd - 2)) * (1.0 / math.sqrt(D))
    att = nc.softmax(scores, axis=-1, allow=allow)
    return _linear(p, name + ".o", _merge_heads(att @ v))


def _mlp(p, name, x):
    return _linear(p, name + ".proj", nc.gelu(_linear(p, name + ".fc", x)))


def _encoder_block(p, name, x, allow, cfg: ModelConfig, ctx: Ctx):
    h = _ln(p, name + ".ln1", x)
    x = x + nc.dropout(attention(p, name + ".attn", h, h, allow, cfg.heads), cfg.dropout, ctx.rng, ctx.training)
    x = x + nc.dropout(_mlp(p, name + ".mlp", _ln(p, name + ".ln2", x)), cfg.dropout, ctx.rng, ctx.training)
    return x


# ---------------------------------------------------------------- encoders

@dataclass
class EncoderOutput:
    latents: Tensor                        # [B, T, E] per step, or [N, E] CLS latents in state mode
    prefix: Tensor | None = None           # [B, G, E] goal latents (sequence mode)
    tokens: Tensor | None = None           # [N, 1 + slots + G, E] every latent (state mode)
    step_mask: np.ndarray | None = None    # [B, T]
    goal_mask: np.ndarray | None = None    # [B, G] / [N, G]
    extra: dict = field(default_factory=dict)


def _check_goal(goal: np.ndarray, cfg: ModelConfig):
    if goal.shape[-1] > cfg.max_goal_len:
        raise SequenceLengthError(f"goal has {goal.shape[-1]} tokens, max_goal_len is {cfg.max_goal_len}")
    if goal.size and (goal.min() < 0 or goal.max() >= cfg.text_vocab_size):
        raise ValueError("goal token outside text vocabulary")


def encode_sequence(params, cfg: ModelConfig, obs_features: np.ndarray, step_mask: np.ndarray,
                    goal: np.ndarray, goal_mask: np.ndarray, ctx: Ctx = EVAL,
                    instr_block: np.ndarray | None = None, instr_block_mask: np.ndarray | None = None
                    ) -> EncoderOutput:
    """Causal encoder.  ``obs_features`` is ``[B, T, obs_feature_dim]`` (multi-hot)."""
    B, T, F = obs_features.shape
    if T > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence of {T} steps exceeds max_seq_len {cfg.max_seq_len}")
    if T < 1:
        raise EmptySequenceError("empty observation sequence")
    if F != cfg.obs_feature_dim:
        raise ShapeError(f"observation features have width {F}, expected {cfg.obs_feature_dim}")
    _check_goal(goal, cfg)
    p = params
    dt = p["enc.obs.w"].dtype
    G = goal.shape[1]
    x_obs = Tensor(obs_features.astype(dt, copy=False)) @ p["enc.obs.w"] + p["enc.obs.b"] + p["enc.time_pos"][:T]
    parts = [nc.take_rows(p["enc.goal_tok"], goal) + p["enc.goal_pos"][:G]]
    valid = [goal_mask]
    if cfg.instr_block_len:
        if instr_block is None:
            raise ShapeError("this encoder requires an instruction block input")
        Lb = instr_block.shape[1]
        if Lb > cfg.instr_block_len:
            raise SequenceLengthError(f"instruction block of {Lb} tokens exceeds {cfg.instr_block_len}")
        parts.append(nc.take_rows(p["enc.goal_tok"], instr_block) + p["enc.block_pos"][:Lb])
        valid.append(instr_block_mask)
    elif instr_block is not None:
        raise ShapeError("instruction block given to an encoder configured without one")
    Np = sum(x.shape[1] for x in parts)
    x = nc.concat(parts + [x_obs], axis=1)
    key_valid = np.concatenate(valid + [step_mask], axis=1)
    N = Np + T
    structural = np.zeros((N, N), dtype=bool)
    structural[:, :Np] = True
    structural[Np:, Np:] = build_causal_mask(T)
    allow = (structural[None] & key_valid[:, None, :])[:, None]
    x = nc.dropout(x, cfg.dropout, ctx.rng, ctx.training)
    for i in range(cfg.encoder_blocks):
        x = _encoder_block(p, f"enc.h{i}", x, allow, cfg, ctx)
    x = _ln(p, "enc.ln_f", x)
    return EncoderOutput(latents=x[:, Np:], prefix=x[:, :G], step_mask=step_mask, goal_mask=goal_mask)


def encode_state(params, cfg: ModelConfig, obs_tokens: np.ndarray, goal: np.ndarray,
                 goal_mask: np.ndarray, ctx: Ctx = EVAL) -> EncoderOutput:
    """Per-observation encoder over ``[CLS, slot tokens, goal tokens]`` with full attention."""
    N, P = obs_tokens.shape
    if P != cfg.obs_slots:
        raise ShapeError(f"observation has {P} slots, expected {cfg.obs_slots}")
    if obs_tokens.size and (obs_tokens.min() < 0 or obs_tokens.max() >= cfg.obs_vocab_size):
        raise ValueError("observation token outside observation vocabulary")
    _check_goal(goal, cfg)
    p = params
    G = goal.shape[1]
    E = cfg.embed_dim
    cls = p["enc.cls"].reshape(1, 1, E) + nc.Tensor(np.zeros((N, 1, 1), dtype=p["enc.cls"].dtype))
    x_obs = nc.take_rows(p["enc.obs_tok"], obs_tokens) + p["enc.slot_pos"]
    x_goal = nc.take_rows(p["enc.goal_tok"], goal) + p["enc.goal_pos"][:G]
    x = nc.concat([cls, x_obs, x_goal], axis=1)
    key_valid = np.concatenate([np.ones((N, 1 + P), dtype=bool), goal_mask], axis=1)
    allow = key_valid[:, None, None, :]
    x = nc.dropout(x, cfg.dropout, ctx.rng, ctx.training)
    for i in range(cfg.encoder_blocks):
        x = _encoder_block(p, f"enc.h{i}", x, allow, cfg, ctx)
    x = _ln(p, "enc.ln_f", x)
    return EncoderOutput(latents=x[:, 0], tokens=x, goal_mask=goal_mask)


def policy_logits(params, enc: EncoderOutput) -> Tensor:
    """Dense action head applied to every step latent (sequence) or to ``z_CLS`` (state)."""
    return _linear(params, "pi", enc.latents)


# ---------------------------------------------------------------- decoder

def sequence_memory(enc: EncoderOutput, include_goal: bool) -> tuple[Tensor, int]:
    """Cross-attention memory ``[B, N, E]`` and the number of goal keys in front of the step keys."""
    if include_goal:
        return nc.concat([enc.prefix, enc.latents], axis=1), enc.prefix.shape[1]
    return enc.latents, 0


def sequence_cross_allow(intervals: np.ndarray, lengths: np.ndarray, T: int, cfg: ModelConfig,
                         goal_mask_rows: np.ndarray | None = None, include_obs: bool = True) -> np.ndarray:
    """Row-wise allow matrix over ``[goal keys?, z_1 .. z_T]``.

    ``intervals`` are the rows' ``[start, end)``; ``lengths`` the owning trajectories' step counts.
    """
    steps = np.arange(1, T + 1)[None, :]
    if not include_obs:
        obs_allow = np.zeros((len(lengths), T), dtype=bool)
    elif cfg.cross_mask:
        caps = np.minimum(instruction_caps(intervals, cfg.mask_mode), lengths)
        obs_allow = steps <= caps[:, None]
    else:
        obs_allow = steps <= np.asarray(lengths)[:, None]
    if goal_mask_rows is not None:
        return np.concatenate([goal_mask_rows, obs_allow], axis=1)
    return obs_allow


def decode_instruction_logits(params, cfg: ModelConfig, tokens_in: np.ndarray, memory: Tensor,
                              mem_index: np.ndarray | None, cross_allow: np.ndarray,
                              ctx: Ctx = EVAL) -> Tensor:
    """Next-token logits ``[R, L, V]`` for BOS-prefixed rows ``tokens_in``.

    Row ``r`` cross-attends ``memory[mem_index[r]]`` (or ``memory[r]`` when
    ``mem_index`` is None) restricted to ``cross_allow[r]``.
    """
    R, L = tokens_in.shape
    if L > cfg.max_instr_len:
        raise SequenceLengthError(f"instruction of {L} tokens exceeds max_instr_len {cfg.max_instr_len}")
    n_mem = memory.shape[1]
    if cross_allow.shape != (R, n_mem):
        raise ShapeError(f"cross mask {cross_allow.shape} does not match rows {R} x memory keys {n_mem}")
    if not cross_allow.any(axis=1).all():
        raise ShapeError("an instruction row has no attendable latent")
    p = params
    x = nc.take_rows(p["dec.tok"], tokens_in) + p["dec.pos"][:L]
    x = nc.dropout(x, cfg.dropout, ctx.rng, ctx.training)
    self_allow = build_causal_mask(L)[None, None]
    c_allow = cross_allow[:, None, None, :]
    for i in range(cfg.decoder_blocks):
        name = f"dec.h{i}"
        h = _ln(p, name + ".ln1", x)
        x = x + nc.dropout(attention(p, name + ".self", h, h, self_allow, cfg.heads),
                           cfg.dropout, ctx.rng, ctx.training)
        h = _ln(p, name + ".ln2", x)
        x = x + nc.dropout(attention(p, name + ".cross", h, memory, c_allow, cfg.heads, kv_index=mem_index),
                           cfg.dropout, ctx.rng, ctx.training)
        x = x + nc.dropout(_mlp(p, name + ".mlp", _ln(p, name + ".ln3", x)), cfg.dropout, ctx.rng, ctx.training)
    x = _ln(p, "dec.ln_f", x)
    return _linear(p, "dec.out", x)


def greedy_decode(params, cfg: ModelConfig, memory: Tensor, mem_index: np.ndarray | None,
                  cross_allow: np.ndarray, max_len: int | None = None, bos: int = 1, eos: int = 2,
                  ctx: Ctx = EVAL, eos_run: int = 1) -> list[list[int]]:
    """Argmax decoding for every row; returns token ids without BOS and the terminating EOS run.

    A row stops once it has emitted ``eos_run`` consecutive EOS tokens (use 2
    for EOS-separated multi-instruction plans).
    """
    max_len = max_len or cfg.max_instr_len
    R = cross_allow.shape[0]
    toks = np.full((R, 1), bos, dtype=np.int64)
    run = np.zeros(R, dtype=np.int64)
    with nc.no_grad():
        while toks.shape[1] < max_len:
            logits = decode_instruction_logits(params, cfg, toks, memory, mem_index, cross_allow, ctx)
            nxt = logits.data[:, -1].argmax(axis=-1)
            done = run >= eos_run
            nxt = np.where(done, eos, nxt)
            toks = np.concatenate([toks, nxt[:, None]], axis=1)
            run = np.where(nxt == eos, run + 1, 0)
            if (run >= eos_run).all():
                break
    out = []
    for row in toks[:, 1:]:
        ids, k = [], 0
        for t in row.tolist():
            k = k + 1 if t == eos else 0
            if k >= eos_run:
                ids = ids[: len(ids) - (eos_run - 1)]
                break
            ids.append(t)
        out.append(ids)
    return out
