"""Command-line front end: ``instrpred <verb> [--config FILE] [--flag value ...]``.

Configuration is resolved in layers: built-in defaults, then the values of
the named preset (if any), then the config file, then command-line flags.
Config files are plain ``key = value`` lines grouped under ``[section]``
headers; every documented key is listed in ``KEYS`` and has exactly one flag.
A relative ``--config`` path that does not exist is looked up in the
directory named by ``$INSTRPRED_CONFIG_DIR``.

All randomness derives from the single ``run.seed`` master seed.  Each
consumer gets its own child seed ``child_seed(master, purpose)``, computed
with numpy's ``SeedSequence([master, index of purpose in SEED_PURPOSES])``.

Every command writes into ``<run.out_dir>/<verb>-<config hash>``; a lock
file keeps two commands from writing the same run directory at once.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from . import numcore as nc
from .dataset import build_vocab_from_trajectories, codec_for, read_trajectories, write_trajectories
from .evaluation import (EmptyReportError, EvalReport, ExperimentConfig, GridSpec, HierarchyPolicy, ModelPolicy,
                         build_pool, difficulty_breakdown, evaluate_policy, language_metrics,
                         run_experiment_grid, success_rate)
from .training import (OBJECTIVES, PRESETS, TrainConfig, TrainConfigError, fit_model_config, hierarchy_train,
                       plan_tokens, probe_train, train)

ENV_CONFIG_DIR = "INSTRPRED_CONFIG_DIR"
VERBS = ("gen-data", "train", "eval", "probe", "grid", "report")
SEED_PURPOSES = ("data", "train", "eval", "probe")


class ConfigValueError(ValueError):
    """A config key received a value it cannot take."""


class DegeneratePlotError(ValueError):
    pass


class RunLockedError(RuntimeError):
    pass


def child_seed(master: int, purpose: str) -> int:
    idx = SEED_PURPOSES.index(purpose)
    return int(np.random.SeedSequence([master, idx]).generate_state(1)[0] & 0x7FFFFFFF)


# ---------------------------------------------------------------- value parsers

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _pos_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _fraction(text: str) -> float:
    v = _float(text)
    if not 0 <= v <= 1:
        raise ValueError("must lie in [0, 1]")
    return v


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _range(text: str) -> tuple[int, ...]:
    """``"2"`` -> (2,), ``"1-3"`` -> (1, 2, 3), ``"1,3"`` -> (1, 3)."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if lo > hi:
                raise ValueError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out or min(out) < 1:
        raise ValueError("difficulties must be >= 1")
    return tuple(sorted(set(out)))


def _list(item: Callable[[str], object]) -> Callable[[str], list]:
    def parse(text: str) -> list:
        vals = [item(p.strip()) for p in text.split(",") if p.strip()]
        if not vals:
            raise ValueError("empty list")
        return vals
    return parse


def _text(text: str) -> str:
    return text


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        if v and all(isinstance(x, int) for x in v) and list(v) == list(range(v[0], v[-1] + 1)) and len(v) > 1:
            return f"{v[0]}-{v[-1]}"
        return ",".join(_show(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- key registry

@dataclass(frozen=True)
class Key:
    section: str
    name: str
    flag: str
    parse: Callable[[str], object]
    default: object
    help: str

    @property
    def dest(self) -> str:
        return f"{self.section}.{self.name}"


_T, _M = TrainConfig(), M.ModelConfig()

KEYS: tuple[Key, ...] = (
    Key("run", "seed", "--seed", int, 0, "master seed; every other seed derives from it"),
    Key("run", "out_dir", "--out-dir", _text, "runs", "root directory for run directories"),
    Key("run", "preset", "--preset", _choice("none", *sorted(PRESETS)), "none", "named hyperparameter preset"),

    Key("data", "demos", "--demos", _pos_int, 500, "number of training demonstrations"),
    Key("data", "difficulty", "--difficulty", _range, (1, 2, 3), "task difficulties, e.g. 1-3"),
    Key("data", "grid_size", "--grid-size", _pos_int, 7, "world side length"),
    Key("data", "observability", "--observability", _choice("full", "partial"), "full", "full or partial view"),
    Key("data", "window", "--window", _pos_int, 5, "partial observation window (odd)"),
    Key("data", "placement_window", "--placement-window", _pos_int, 5,
        "task generation keeps one needed resource outside this initial view"),
    Key("data", "holdout_fraction", "--holdout-fraction", _fraction, 0.25, "fraction of task keys held out"),
    Key("data", "dataset", "--dataset", _text, "", "existing demonstrations file to train on instead"),

    Key("train", "objective", "--objective", _choice(*OBJECTIVES[:5]), _T.objective, "training objective"),
    Key("train", "lambda_lang", "--lambda", _float, _T.lambda_lang, "weight of the instruction loss"),
    Key("train", "steps", "--steps", _nonneg_int, _T.steps, "optimiser steps"),
    Key("train", "batch_size", "--batch-size", _pos_int, _T.batch_size, "trajectories per batch"),
    Key("train", "learning_rate", "--learning-rate", _float, _T.learning_rate, "Adam learning rate"),
    Key("train", "epsilon", "--epsilon", _float, _T.epsilon, "Adam epsilon"),
    Key("train", "beta1", "--beta1", _float, _T.beta1, "Adam beta1"),
    Key("train", "beta2", "--beta2", _float, _T.beta2, "Adam beta2"),
    Key("train", "weight_decay", "--weight-decay", _float, _T.weight_decay, "decoupled weight decay"),
    Key("train", "grad_clip_norm", "--grad-clip-norm", _float, _T.grad_clip_norm, "global-norm clip, 0 = off"),
    Key("train", "mask_mode", "--mask-mode", _choice(*M.MASK_MODES), _T.mask_mode, "decoder cross-mask cap"),
    Key("train", "raw_sum", "--raw-sum", _bool, _T.raw_sum, "sum instead of mean loss reduction"),
    Key("train", "checkpoint_every", "--checkpoint-every", _nonneg_int, _T.checkpoint_every,
        "periodic checkpoint interval, 0 = final only"),
    Key("train", "eval_dropout", "--eval-dropout", _bool, _T.eval_dropout, "keep dropout on in evaluation"),
    Key("train", "plan_rows", "--plan-rows", _pos_int, _T.plan_rows, "hierarchy: sampled rows per trajectory"),

    Key("model", "encoder", "--encoder", _choice("sequence", "state"), _M.encoder, "encoder variant"),
    Key("model", "encoder_blocks", "--encoder-blocks", _pos_int, _M.encoder_blocks, "encoder blocks"),
    Key("model", "decoder_blocks", "--decoder-blocks", _pos_int, _M.decoder_blocks, "decoder blocks"),
    Key("model", "embed_dim", "--embed-dim", _pos_int, _M.embed_dim, "embedding width"),
    Key("model", "mlp_dim", "--mlp-dim", _pos_int, _M.mlp_dim, "MLP hidden width"),
    Key("model", "heads", "--heads", _pos_int, _M.heads, "attention heads"),
    Key("model", "dropout", "--dropout", _fraction, _M.dropout, "dropout rate"),
    Key("model", "max_seq_len", "--max-seq-len", _pos_int, _M.max_seq_len, "longest trajectory"),
    Key("model", "max_goal_len", "--max-goal-len", _pos_int, _M.max_goal_len, "longest goal text"),
    Key("model", "max_instr_len", "--max-instr-len", _pos_int, _M.max_instr_len, "longest instruction"),
    Key("model", "cross_mask", "--cross-mask", _bool, _M.cross_mask, "mask decoder cross attention"),
    Key("model", "goal_in_cross", "--goal-in-cross", _bool, _M.goal_in_cross, "decoder also sees goal"),

    Key("eval", "checkpoint", "--checkpoint", _text, "", "train run directory to evaluate"),
    Key("eval", "episodes", "--episodes", _pos_int, 200, "unseen-task episodes"),
    Key("eval", "max_steps", "--max-steps", _pos_int, 120, "step budget per episode"),
    Key("eval", "lang_demos", "--lang-demos", _pos_int, 100, "held-out demos for language metrics"),

    Key("grid", "demos", "--grid-demos", _list(_pos_int), [150], "demo counts"),
    Key("grid", "annotation", "--annotation", _list(_fraction), [1.0], "annotation fractions"),
    Key("grid", "objectives", "--objectives", _list(_choice(*OBJECTIVES[:5])), ["bc", "lang"], "objectives"),
    Key("grid", "seeds", "--seeds", _list(_nonneg_int), [0], "cell seeds"),
    Key("grid", "cross_masks", "--cross-masks", _list(_bool), [True], "cross-mask settings"),
    Key("grid", "mask_modes", "--mask-modes", _list(_choice(*M.MASK_MODES)), ["execution"], "mask modes"),
    Key("grid", "workers", "--workers", _pos_int, 1, "parallel grid workers"),

    Key("report", "input", "--input", _text, "", "report CSV to read"),
    Key("report", "output", "--output", _text, "", "CSV copy to write (default: run directory)"),
    Key("report", "plot", "--plot", _bool, True, "also write an SVG plot"),
    Key("report", "x_key", "--x-key", _text, "demos", "plot x column"),
    Key("report", "y_key", "--y-key", _text, "success", "plot y column"),
    Key("report", "series_key", "--series-key", _text, "objective", "plot series column"),
)
KEY_INDEX = {k.dest: k for k in KEYS}

# sections each verb reads (and therefore hashes into its run directory name)
VERB_SECTIONS = {
    "gen-data": ("run", "data"),
    "train": ("run", "data", "train", "model"),
    "eval": ("run", "eval"),
    "probe": ("run", "data", "train", "model", "eval"),
    "grid": ("run", "data", "train", "model", "eval", "grid"),
    "report": ("run", "report"),
}


def parse_value(key: Key, text: str):
    try:
        return key.parse(str(text).strip())
    except ValueError as e:
        raise ConfigValueError(f"invalid value {text!r} for {key.dest}: {e}") from None


def read_config_file(path: str | os.PathLike) -> dict[str, object]:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(ENV_CONFIG_DIR):
        p = Path(os.environ[ENV_CONFIG_DIR]) / p
    if not p.exists():
        raise ConfigValueError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read(p, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigValueError(f"malformed config file {p}: {e}") from None
    out: dict[str, object] = {}
    for section in cp.sections():
        for name, text in cp.items(section):
            dest = f"{section}.{name}"
            if dest not in KEY_INDEX:
                raise ConfigValueError(f"unknown config key {dest} in {p}")
            out[dest] = parse_value(KEY_INDEX[dest], text)
    return out


def resolve(file_values: dict[str, object], flag_values: dict[str, object]) -> dict[str, object]:
    """defaults < preset < config file < flags."""
    cfg = {k.dest: k.default for k in KEYS}
    preset_name = flag_values.get("run.preset", file_values.get("run.preset", cfg["run.preset"]))
    if preset_name != "none":
        for section in ("train", "model"):
            for name, v in PRESETS[preset_name][section].items():
                if f"{section}.{name}" in KEY_INDEX:
                    cfg[f"{section}.{name}"] = v
    cfg.update(file_values)
    cfg.update(flag_values)
    return cfg


def format_config(cfg: dict[str, object], sections: Sequence[str] | None = None) -> str:
    lines = []
    for section in dict.fromkeys(k.section for k in KEYS):
        if sections is not None and section not in sections:
            continue
        lines.append(f"[{section}]")
        lines.extend(f"{k.name} = {_show(cfg[k.dest])}" for k in KEYS if k.section == section)
        lines.append("")
    return "\n".join(lines)


def config_hash(verb: str, cfg: dict[str, object]) -> str:
    text = verb + "\n" + format_config(cfg, VERB_SECTIONS[verb])
    return hashlib.sha256(text.encode()).hexdigest()[:12]


# ---------------------------------------------------------------- config objects

def train_config(cfg: dict) -> TrainConfig:
    kw = {k.name: cfg[k.dest] for k in KEYS if k.section == "train"}
    return TrainConfig(seed=child_seed(cfg["run.seed"], "train"), observability=cfg["data.observability"], **kw)


def model_config(cfg: dict) -> M.ModelConfig:
    kw = {k.name: cfg[k.dest] for k in KEYS if k.section == "model"}
    return M.ModelConfig(mask_mode=cfg["train.mask_mode"], observability=cfg["data.observability"], **kw)


def experiment_config(cfg: dict) -> ExperimentConfig:
    return ExperimentConfig(difficulties=tuple(cfg["data.difficulty"]), pool_seed=child_seed(cfg["run.seed"], "data"),
                            holdout_fraction=cfg["data.holdout_fraction"], eval_episodes=cfg["eval.episodes"],
                            eval_max_steps=cfg["eval.max_steps"], grid_size=cfg["data.grid_size"],
                            observability=cfg["data.observability"], window=cfg["data.window"],
                            placement_window=cfg["data.placement_window"], lang_eval_demos=cfg["eval.lang_demos"],
                            train=train_config(cfg), model=model_config(cfg))


def validate(cfg: dict) -> None:
    """Build every config object once so bad combinations fail before any work starts."""
    try:
        experiment_config(cfg)
    except (TrainConfigError, M.ModelConfigError, ValueError) as e:
        raise ConfigValueError(f"{type(e).__name__}: {e}") from None
    if cfg["data.observability"] == "partial" and cfg["data.window"] % 2 == 0:
        raise ConfigValueError("data.window must be odd")


# ---------------------------------------------------------------- reports and plots

def emit_csv_report(report: EvalReport, path: str | os.PathLike) -> Path:
    if not len(report):
        raise EmptyReportError("refusing to write an empty report")
    p = Path(path)
    p.write_text(report.to_csv(), encoding="utf-8")
    return p


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _num(v: float) -> str:
    return f"{v:.2f}"


def emit_svg_plot(report: EvalReport, x_key: str, y_key: str, series_key: str, path: str | os.PathLike) -> Path:
    """Line plot of mean ``y_key`` against ``x_key``, one line per ``series_key`` value.

    Points aggregate rows sharing (series, x), typically seeds; error bars
    show their population standard deviation.  Rows whose y is missing are
    skipped.  Output is a deterministic, self-contained SVG document.
    """
    if not len(report):
        raise EmptyReportError("refusing to plot an empty report")
    for k in (x_key, y_key, series_key):
        if k not in report.rows[0]:
            raise KeyError(f"report has no column {k!r}")
    groups: dict[object, dict[float, list[float]]] = {}
    for r in report.rows:
        if r[y_key] is None:
            continue
        groups.setdefault(r[series_key], {}).setdefault(float(r[x_key]), []).append(float(r[y_key]))
    xs = sorted({x for g in groups.values() for x in g})
    if len(xs) < 2:
        raise DegeneratePlotError(f"need at least 2 distinct {x_key} values to plot, got {len(xs)}")
    stats = {s: [(x, float(np.mean(v)), float(np.std(v))) for x, v in sorted(g.items())]
             for s, g in groups.items()}
    ys = [m + d for pts in stats.values() for _, m, d in pts] + [m - d for pts in stats.values() for _, m, d in pts]
    if min(ys) >= 0 and max(ys) <= 1:
        y0, y1 = 0.0, 1.0
    else:
        y0, y1 = min(ys), max(ys)
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
    W, H, L, R, T, B = 560, 360, 60, 140, 20, 50
    pw, ph = W - L - R, H - T - B
    px = lambda x: L + (x - xs[0]) / (xs[-1] - xs[0]) * pw
    py = lambda y: T + (1 - (y - y0) / (y1 - y0)) * ph
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}" stroke="black"/>']
    for x in xs:
        out.append(f'<line x1="{_num(px(x))}" y1="{T + ph}" x2="{_num(px(x))}" y2="{T + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_num(px(x))}" y="{T + ph + 16}" text-anchor="middle">{x:g}</text>')
    for i in range(6):
        y = y0 + (y1 - y0) * i / 5
        out.append(f'<line x1="{L - 4}" y1="{_num(py(y))}" x2="{L}" y2="{_num(py(y))}" stroke="black"/>')
        out.append(f'<text x="{L - 6}" y="{_num(py(y) + 4)}" text-anchor="end">{y:.2f}</text>')
    out.append(f'<text x="{L + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{x_key}</text>')
    out.append(f'<text x="14" y="{T + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {T + ph / 2:.1f})">{y_key}</text>')
    for i, s in enumerate(sorted(stats, key=str)):
        colour = _PALETTE[i % len(_PALETTE)]
        pts = stats[s]
        coords = " ".join(f"{_num(px(x))},{_num(py(m))}" for x, m, _ in pts)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        for x, m, d in pts:
            out.append(f'<line x1="{_num(px(x))}" y1="{_num(py(m - d))}" x2="{_num(px(x))}" '
                       f'y2="{_num(py(m + d))}" stroke="{colour}"/>')
            out.append(f'<circle cx="{_num(px(x))}" cy="{_num(py(m))}" r="3" fill="{colour}"/>')
        ly = T + 14 + 18 * i
        out.append(f'<line x1="{L + pw + 12}" y1="{ly}" x2="{L + pw + 32}" y2="{ly}" stroke="{colour}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{L + pw + 38}" y="{ly + 4}">{series_key}={s}</text>')
    out.append("</svg>")
    p = Path(path)
    p.write_text("\n".join(out) + "\n", encoding="utf-8")
    return p


# ---------------------------------------------------------------- run directories

class RunDir:
    """``<out_dir>/<verb>-<hash>`` guarded by an exclusive lock file."""

    def __init__(self, verb: str, cfg: dict):
        self.path = Path(cfg["run.out_dir"]) / f"{verb}-{config_hash(verb, cfg)}"
        self.lock = self.path / ".lock"
        self._text = format_config(cfg, VERB_SECTIONS[verb])

    def __enter__(self) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.path} is locked by another command (remove {self.lock} if stale)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        (self.path / "config.ini").write_text(self._text, encoding="utf-8")
        return self.path

    def __exit__(self, *exc) -> None:
        self.lock.unlink(missing_ok=True)


# ---------------------------------------------------------------- verbs

def _training_data(cfg: dict):
    """(train demos, pool) -- the pool is None when training on an existing file."""
    if cfg["data.dataset"]:
        return read_trajectories(cfg["data.dataset"]), None
    pool = build_pool(experiment_config(cfg), cfg["data.demos"])
    return pool.train_demos, pool


def cmd_gen_data(cfg: dict, run: Path) -> None:
    pool = build_pool(experiment_config(cfg), cfg["data.demos"])
    write_trajectories(run / "demos.jsonl", pool.train_demos)
    write_trajectories(run / "heldout.jsonl", pool.eval_demos)
    build_vocab_from_trajectories(pool.train_demos).save(run / "vocab.txt")
    print(f"wrote {len(pool.train_demos)} training and {len(pool.eval_demos)} held-out demonstrations to {run}")


def cmd_train(cfg: dict, run: Path) -> None:
    data, _ = _training_data(cfg)
    tcfg, mcfg = train_config(cfg), model_config(cfg)
    if tcfg.objective == "hierarchy":
        res = hierarchy_train(tcfg, data, mcfg, out_dir=run)
        last = res.history_low[-1] if res.history_low else None
    else:
        res = train(tcfg, data, mcfg, out_dir=run)
        last = res.history[-1] if res.history else None
    res.vocab.save(run / "vocab.txt")
    if last:
        print(f"step {last['step']}: total {last['total']:.4f} action_nll {last['action_nll']:.4f}")
    print(f"checkpoint written under {run}")


def _load_trained(train_dir: Path):
    """Rebuild the configs, vocabulary and parameters of a finished train run."""
    if not (train_dir / "config.ini").exists():
        raise ConfigValueError(f"{train_dir} is not a train run directory")
    tcfg_all = resolve(read_config_file(train_dir / "config.ini"), {})
    data, pool = _training_data(tcfg_all)
    vocab, codec = build_vocab_from_trajectories(data), codec_for(data)
    tcfg, mcfg = train_config(tcfg_all), model_config(tcfg_all)
    if tcfg.objective == "hierarchy":
        plan_len = max(len(plan_tokens(tr, vocab)) for tr in data) + 2
        high_cfg = fit_model_config(mcfg, vocab, codec, replace(tcfg, objective="lang"), plan_len)
        low_cfg = replace(high_cfg, instr_block_len=plan_len)
        high = M.params_from_arrays(nc.checkpoint.load(train_dir / "high" / "checkpoint.ipck"))
        low = M.params_from_arrays(nc.checkpoint.load(train_dir / "low" / "checkpoint.ipck"))
        return tcfg_all, tcfg, (high, high_cfg, low, low_cfg), vocab, codec
    mcfg = fit_model_config(mcfg, vocab, codec, tcfg)
    params = M.params_from_arrays(nc.checkpoint.load(train_dir / "checkpoint.ipck"))
    return tcfg_all, tcfg, (params, mcfg), vocab, codec


def cmd_eval(cfg: dict, run: Path) -> None:
    if not cfg["eval.checkpoint"]:
        raise ConfigValueError("eval needs eval.checkpoint (a train run directory)")
    train_cfg, tcfg, model, vocab, codec = _load_trained(Path(cfg["eval.checkpoint"]))
    exp = replace(experiment_config(train_cfg), eval_episodes=cfg["eval.episodes"],
                  eval_max_steps=cfg["eval.max_steps"], lang_eval_demos=cfg["eval.lang_demos"])
    pool = build_pool(exp, train_cfg["data.demos"])
    ctx = M.Ctx(training=True, rng=np.random.default_rng(child_seed(cfg["run.seed"], "eval"))) \
        if tcfg.eval_dropout else M.EVAL
    acc = bl = nll = None
    if tcfg.objective == "hierarchy":
        high, high_cfg, low, low_cfg = model
        policy = HierarchyPolicy(high, high_cfg, low, low_cfg, vocab, codec, ctx=ctx)
    else:
        params, mcfg = model
        policy = ModelPolicy(params, mcfg, vocab, codec, ctx)
        if tcfg.objective == "lang":
            lm = language_metrics(params, mcfg, pool.eval_demos, vocab, codec)
            acc, bl, nll = lm.token_accuracy, lm.bleu, lm.lang_nll
    results = evaluate_policy(policy, pool.eval_tasks, exp.eval_max_steps, observability=exp.observability,
                              window=exp.window, allowed_keys=pool.unseen_keys)
    per = {r.difficulty_steps: (r.successes, r.count) for r in difficulty_breakdown(results)}
    row = {"cell": Path(cfg["eval.checkpoint"]).name, "config_hash": config_hash("train", train_cfg),
           "objective": tcfg.objective, "demos": train_cfg["data.demos"], "annotation": 1.0,
           "mask_mode": tcfg.mask_mode, "cross_mask": train_cfg["model.cross_mask"], "seed": train_cfg["run.seed"],
           "episodes": len(results), "success": success_rate(results), "token_accuracy": acc, "bleu": bl,
           "lang_nll": nll, "per_difficulty": per}
    emit_csv_report(EvalReport([row]), run / "report.csv")
    print(f"success {row['success']:.3f} over {len(results)} unseen episodes; report at {run / 'report.csv'}")


def cmd_probe(cfg: dict, run: Path) -> None:
    exp = experiment_config(cfg)
    pool = build_pool(exp, cfg["data.demos"])
    tcfg = replace(train_config(cfg), seed=child_seed(cfg["run.seed"], "probe"))
    lines = ["probe,accuracy"]
    for name, with_obs in (("goal_only", False), ("goal_obs", True)):
        res = probe_train(tcfg, pool.train_demos, with_obs, model_config(cfg), pool.eval_demos)
        lines.append(f"{name},{res.accuracy!r}")
        print(f"{name}: token accuracy {res.accuracy:.4f}")
    (run / "probe.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_grid(cfg: dict, run: Path) -> None:
    grid = GridSpec(demos=cfg["grid.demos"], annotation=cfg["grid.annotation"], objectives=cfg["grid.objectives"],
                    seeds=cfg["grid.seeds"], cross_mask=cfg["grid.cross_masks"], mask_modes=cfg["grid.mask_modes"])
    report = run_experiment_grid(grid, experiment_config(cfg), cache_dir=run, workers=cfg["grid.workers"])
    emit_csv_report(report, run / "report.csv")
    xs = {r["demos"] for r in report.rows}
    if len(xs) >= 2:
        emit_svg_plot(report, "demos", "success", "objective", run / "success.svg")
    for r in report.rows:
        print(f"{r['cell']}: success {r['success']:.3f}")


def cmd_report(cfg: dict, run: Path) -> None:
    if not cfg["report.input"]:
        raise ConfigValueError("report needs report.input (a report CSV)")
    report = EvalReport.from_csv(Path(cfg["report.input"]).read_text(encoding="utf-8"))
    out = Path(cfg["report.output"]) if cfg["report.output"] else run / "report.csv"
    emit_csv_report(report, out)
    print(f"wrote {len(report)} rows to {out}")
    if cfg["report.plot"]:
        svg = out.with_suffix(".svg")
        emit_svg_plot(report, cfg["report.x_key"], cfg["report.y_key"], cfg["report.series_key"], svg)
        print(f"wrote plot {svg}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "grid": cmd_grid, "report": cmd_report}


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="instrpred", description="Instruction-prediction imitation learning experiments.")
    sub = parser.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    sub.required = True
    for verb in VERBS:
        p = sub.add_parser(verb, help=COMMANDS[verb].__name__.replace("cmd_", "").replace("_", "-"))
        p.add_argument("--config", default=None, help="config file (key = value lines under [sections])")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and stop")
        for k in KEYS:
            p.add_argument(k.flag, dest=k.dest, default=None, metavar=k.name.upper(),
                           help=f"{k.help} [{k.dest}, default {_show(k.default)}]")
    return parser


def parse_and_dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one command; returns the process exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        ns = build_parser().parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:              # --help
        return int(e.code or 0)
    try:
        flags = {k.dest: parse_value(k, getattr(ns, k.dest)) for k in KEYS if getattr(ns, k.dest) is not None}
        file_values = read_config_file(ns.config) if ns.config else {}
        cfg = resolve(file_values, flags)
        validate(cfg)
    except ConfigValueError as e:
        print(f"instrpred: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(format_config(cfg, VERB_SECTIONS[ns.verb]))
    if ns.dry_run:
        return 0
    try:
        with RunDir(ns.verb, cfg) as run:
            COMMANDS[ns.verb](cfg, run)
    except ConfigValueError as e:
        print(f"instrpred: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # every other failure is a nonzero exit with a named error
        print(f"instrpred: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
