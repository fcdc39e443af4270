"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The experiment criteria (6-9) train real models at desk scale.  Their grid
cells are cached under ``.acceptance-cache/`` in the repository root (or
``$INSTRPRED_ACCEPTANCE_CACHE``), keyed by configuration hash, so a rerun only
retrains cells whose configuration or code version changed.
"""
import hashlib
import json
import os
import statistics
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest
from metric_cases import BLEU_CASES, SUCCESS_CASES, TOKEN_CASES
from test_model import causal_leak, end_to_end_gradient_error, slicing_oracle_error
from test_numcore import PRIMITIVE_CASES, _rng_inputs

from instrpred import model as M
from instrpred.craftworld import (check_partition, default_recipes, generate_task, observe, oracle_rollout,
                                  step)
from instrpred.dataset import EOS, PAD, build_vocab_from_trajectories, codec_for, collate
from instrpred.evaluation import (EpisodeResult, EvalReport, ExperimentConfig, GridCell, GridSpec, ModelPolicy,
                                  bleu, build_pool, rollout_policy, run_cell, run_experiment_grid,
                                  success_rate, token_accuracy)
from instrpred.numcore.gradcheck import check_gradients
from instrpred.training import (TrainConfig, _decoder_rows, encode_batch, fit_model_config, preset, probe_train,
                                train)

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("INSTRPRED_ACCEPTANCE_CACHE", ROOT / ".acceptance-cache"))

SEEDS = (0, 1, 2, 3, 4)
PROBE_SEEDS = (0, 1, 2)
DEMOS = 150

# "crafting-like" hyperparameters (lambda 0.25, decay 0.05, clip 1, dropout 0.1, dropout kept on at
# evaluation) at desk scale: a smaller model, a larger step size and 1000 optimiser steps.
DESK_TRAIN, DESK_MODEL = preset("crafting-like", steps=1000, batch_size=32, learning_rate=1e-3,
                                encoder="sequence", encoder_blocks=2, embed_dim=64, mlp_dim=128, heads=4)
# A 13-cell egocentric window covers the whole 7x7 grid from any position, so the
# agent sees everything, in its own frame of reference.
DESK = ExperimentConfig(difficulties=(1, 2, 3), eval_episodes=200, observability="partial", window=13,
                        lang_eval_demos=100, train=DESK_TRAIN, model=DESK_MODEL)


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def _cache_for(exp: ExperimentConfig) -> Path:
    digest = hashlib.sha256(json.dumps(asdict(exp), sort_keys=True, default=str).encode()).hexdigest()[:12]
    return CACHE / f"grid-{digest}"


def _mean(xs):
    return sum(xs) / len(xs)


# ---------------------------------------------------------------- 1-5: exact properties

def test_criterion_01_gradients(capsys):
    t0 = time.perf_counter()
    worst = {}
    for name, (fn, shapes) in PRIMITIVE_CASES.items():
        for seed in range(3):
            inputs = _rng_inputs(seed, *shapes)
            worst[name] = max(worst.get(name, 0.0), check_gradients(lambda: fn(*inputs), inputs, h=1e-5))
    e2e = end_to_end_gradient_error(max_entries=20)
    top = max(worst, key=worst.get)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and e2e < 1e-4 and secs < 60
    verdict(capsys, 1, ok, f"{len(worst)} ops, worst {top} {worst[top]:.1e}; end-to-end {e2e:.1e}; {secs:.0f}s")


def test_criterion_02_cross_mask_oracle(capsys):
    t0 = time.perf_counter()
    errs = {mode: slicing_oracle_error(mode, cases=100) for mode in M.MASK_MODES}
    secs = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-6 and secs < 60
    verdict(capsys, 2, ok, "masked vs sliced logits, 100 cases per mode: "
            + ", ".join(f"{m} {e:.1e}" for m, e in errs.items()) + f"; {secs:.0f}s")


def test_criterion_03_causality(capsys):
    t0 = time.perf_counter()
    leak = causal_leak(cases=100)
    secs = time.perf_counter() - t0
    verdict(capsys, 3, leak < 1e-6 and secs < 60, f"max change of z_t under future perturbation {leak:.1e}; {secs:.0f}s")


@pytest.fixture(scope="module")
def small_demos():
    return [oracle_rollout(*generate_task(seed, 1 + seed % 3)) for seed in range(16)]


def test_criterion_04_lambda_zero(capsys, small_demos, tmp_path):
    t0 = time.perf_counter()
    base = replace(DESK_TRAIN, steps=20, batch_size=8, seed=3)
    mcfg = replace(DESK_MODEL, embed_dim=32, mlp_dim=64)
    train(replace(base, objective="bc"), small_demos, mcfg, out_dir=tmp_path / "bc")
    train(replace(base, objective="lang", lambda_lang=0.0), small_demos, mcfg, out_dir=tmp_path / "lang0")
    a = (tmp_path / "bc" / "checkpoint.ipck").read_bytes()
    b = (tmp_path / "lang0" / "checkpoint.ipck").read_bytes()
    secs = time.perf_counter() - t0
    verdict(capsys, 4, a == b and secs < 120, f"checkpoints {'bit-identical' if a == b else 'differ'} "
            f"({len(a)} bytes); {secs:.0f}s")


class _Recorder:
    """Wraps a policy and keeps the actions it emits."""

    def __init__(self, policy):
        self.policy, self.actions = policy, []

    def act(self, episodes, histories, goals):
        out = self.policy.act(episodes, histories, goals)
        self.actions.append(int(out[0]))
        return out


def test_criterion_05_overfit(capsys):
    t0 = time.perf_counter()
    state, task = generate_task(3, 3)
    demo = oracle_rollout(state, task)
    cfg = TrainConfig(objective="lang", lambda_lang=1.0, steps=2000, batch_size=1, learning_rate=3e-3)
    mcfg = M.ModelConfig(encoder_blocks=2, decoder_blocks=1, embed_dim=32, mlp_dim=64, heads=4, dropout=0.0)
    vocab, codec = build_vocab_from_trajectories([demo]), codec_for([demo])
    mcfg = fit_model_config(mcfg, vocab, codec, cfg)
    res = train(cfg, [demo], mcfg, vocab, codec)
    first = next((r["step"] for r in res.history if r["total"] < 0.01), None)

    rec = _Recorder(ModelPolicy(res.params, mcfg, vocab, codec))
    rollout_policy(rec, state, task, max_steps=demo.length)
    actions_ok = rec.actions == list(demo.actions)

    batch = collate([demo], vocab, codec, mcfg.max_instr_len)
    enc = encode_batch(res.params, mcfg, batch, codec, M.EVAL)
    _, x_out, mem, idx, allow = _decoder_rows(mcfg, cfg, batch, enc, "lang")
    hyps = M.greedy_decode(res.params, mcfg, mem, idx, allow)
    refs = [[int(t) for t in row if t not in (PAD, EOS)] for row in x_out]
    decode_ok = hyps == refs
    secs = time.perf_counter() - t0
    ok = first is not None and res.history[-1]["total"] < 0.01 and actions_ok and decode_ok and secs < 180
    verdict(capsys, 5, ok, f"loss < 0.01 from step {first} (final {res.history[-1]['total']:.1e}); "
            f"actions {'reproduced' if actions_ok else 'differ'} ({demo.length}); "
            f"instructions {'reproduced' if decode_ok else 'differ'} ({len(refs)}); {secs:.0f}s")


# ---------------------------------------------------------------- 6-8: desk-scale experiments

@pytest.fixture(scope="module")
def desk_grid():
    t0 = time.perf_counter()
    pool = build_pool(DESK, DEMOS)
    cache = _cache_for(DESK)
    main = run_experiment_grid(GridSpec([DEMOS], [1.0], ["lang", "bc"], list(SEEDS)), DESK,
                               cache_dir=cache, pool=pool)
    nomask = run_experiment_grid(GridSpec([DEMOS], [1.0], ["lang"], list(SEEDS), cross_mask=[False]), DESK,
                                 cache_dir=cache, pool=pool)
    half = run_experiment_grid(GridSpec([DEMOS], [0.5], ["lang"], list(SEEDS)), DESK, cache_dir=cache, pool=pool)
    rows = main.rows + nomask.rows + half.rows
    return {"rows": rows, "pool": pool, "cache": cache, "secs": time.perf_counter() - t0}


def _by_seed(rows, **match):
    out = {r["seed"]: r for r in rows if all(r[k] == v for k, v in match.items())}
    assert sorted(out) == list(SEEDS), match
    return out


def test_criterion_06_lang_beats_bc(capsys, desk_grid):
    rows = desk_grid["rows"]
    lang = _by_seed(rows, objective="lang", annotation=1.0, cross_mask=True)
    bc = _by_seed(rows, objective="bc")
    diffs = [lang[s]["success"] - bc[s]["success"] for s in SEEDS]
    wins = sum(d > 0 for d in diffs)
    ok = _mean(diffs) > 0 and wins >= 4
    detail = (f"Lang {_mean([lang[s]['success'] for s in SEEDS]):.3f} vs BC "
              f"{_mean([bc[s]['success'] for s in SEEDS]):.3f}; mean diff {_mean(diffs):+.3f}; "
              f"Lang ahead on {wins}/5 seeds ({', '.join(f'{d:+.3f}' for d in diffs)})")
    verdict(capsys, 6, ok, detail)


def test_criterion_07_mask_ablation(capsys, desk_grid):
    rows = desk_grid["rows"]
    masked = _by_seed(rows, objective="lang", annotation=1.0, cross_mask=True)
    open_ = _by_seed(rows, objective="lang", annotation=1.0, cross_mask=False)
    s_mask = _mean([masked[s]["success"] for s in SEEDS])
    s_open = _mean([open_[s]["success"] for s in SEEDS])
    higher = sum(open_[s]["lang_nll"] > masked[s]["lang_nll"] for s in SEEDS)
    ok = s_open <= s_mask and higher >= 4
    verdict(capsys, 7, ok, f"success with mask {s_mask:.3f}, without {s_open:.3f}; "
            f"held-out lang_nll higher without mask on {higher}/5 seeds")


def test_criterion_08_annotation_trend(capsys, desk_grid):
    rows = desk_grid["rows"]
    groups = {0.0: _by_seed(rows, objective="bc"),
              0.5: _by_seed(rows, objective="lang", annotation=0.5),
              1.0: _by_seed(rows, objective="lang", annotation=1.0, cross_mask=True)}
    acc = {a: _mean([g[s]["token_accuracy"] for s in SEEDS]) for a, g in groups.items() if a > 0}
    succ = {a: [g[s]["success"] for s in SEEDS] for a, g in groups.items()}
    sd = statistics.fmean(statistics.pvariance(v) for v in succ.values()) ** 0.5
    m = {a: _mean(v) for a, v in succ.items()}
    acc_ok = acc[0.5] <= acc[1.0]
    succ_ok = m[0.0] <= m[0.5] + sd and m[0.5] <= m[1.0] + sd
    verdict(capsys, 8, acc_ok and succ_ok,
            f"token accuracy 0%: n/a, 50%: {acc[0.5]:.3f}, 100%: {acc[1.0]:.3f}; success "
            f"{m[0.0]:.3f} / {m[0.5]:.3f} / {m[1.0]:.3f} (pooled sd {sd:.3f})")


# ---------------------------------------------------------------- 9: probe gap

# Goals three to five steps deep have interchangeable ingredients; the oracle
# gathers whichever is nearest, so the instruction order depends on the layout.
PROBE = replace(DESK, difficulties=(3, 4, 5))


def _probe_accuracy(seed: int, with_obs: bool, pool) -> float:
    path = _cache_for(PROBE) / f"probe-{'obs' if with_obs else 'goal'}-s{seed}.json"
    tcfg = replace(PROBE.train, steps=800, seed=seed, observability=PROBE.observability)
    mcfg = replace(PROBE.model, observability=PROBE.observability)
    key = hashlib.sha256(json.dumps([asdict(tcfg), asdict(mcfg), pool.fingerprint()], default=str)
                         .encode()).hexdigest()[:16]
    if path.exists():
        cached = json.loads(path.read_text())
        if cached["key"] == key:
            return cached["accuracy"]
    acc = probe_train(tcfg, pool.train_demos, with_obs, mcfg, pool.eval_demos).accuracy
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"key": key, "accuracy": acc}))
    return acc


def test_criterion_09_probe_gap(capsys):
    pool = build_pool(PROBE, DEMOS)
    goal = [_probe_accuracy(s, False, pool) for s in PROBE_SEEDS]
    obs = [_probe_accuracy(s, True, pool) for s in PROBE_SEEDS]
    gap = 100 * (_mean(obs) - _mean(goal))
    verdict(capsys, 9, gap > 2.0, f"goal-only {100 * _mean(goal):.1f}% vs goal+obs {100 * _mean(obs):.1f}% "
            f"over {len(PROBE_SEEDS)} seeds: gap {gap:+.1f} points")


# ---------------------------------------------------------------- 10-12

def test_criterion_10_metric_oracles(capsys):
    bleu_ok = all(abs(bleu(h.split(), r.split(), n) - e) <= 1e-12 * max(1.0, e) for h, r, n, e in BLEU_CASES)
    tok_ok = all(token_accuracy(p, t, PAD) == e for p, t, e in TOKEN_CASES)
    succ_ok = all(success_rate([EpisodeResult(("x", 0), f, 1) for f in flags]) == e
                  for flags, e in SUCCESS_CASES)
    verdict(capsys, 10, bleu_ok and tok_ok and succ_ok,
            f"BLEU {len(BLEU_CASES)} cases {'match' if bleu_ok else 'MISMATCH'}; token accuracy "
            f"{len(TOKEN_CASES)} {'match' if tok_ok else 'MISMATCH'}; success rate {len(SUCCESS_CASES)} "
            f"{'match' if succ_ok else 'MISMATCH'}")


def test_criterion_11_oracle_soundness(capsys):
    recipes = default_recipes()
    bad = []
    for seed in range(1000):
        state, task = generate_task(seed, 1 + seed % 5)
        tr = oracle_rollout(state, task)
        ok = tr.success and tr.length <= state.max_steps
        try:
            check_partition(tr.intervals, tr.length)
        except ValueError:
            ok = False
        s = state
        for a in tr.actions:
            s, _, success = step(s, a, recipes)
        ok = ok and success and s.has(task.goal_item) and observe(state) == tr.observations[0]
        if not ok:
            bad.append(seed)
    verdict(capsys, 11, not bad, f"1000 tasks over depths 1-5: {1000 - len(bad)} solved within budget, "
            f"replayed and partitioned" + (f"; failures {bad[:5]}" if bad else ""))


def test_criterion_12_reproducible_cells(capsys, desk_grid, tmp_path):
    cell = GridCell("bc", DEMOS, 1.0, SEEDS[0])
    cached = json.loads((desk_grid["cache"] / "cells" / f"{cell.cell_id}.json").read_text())
    rerun = run_experiment_grid(GridSpec([DEMOS], [1.0], ["bc"], [SEEDS[0]]), DESK, cache_dir=tmp_path,
                                pool=desk_grid["pool"])
    fresh = (tmp_path / "cells" / f"{cell.cell_id}.json").read_text()
    same = json.loads(fresh)["csv"] == cached["csv"] and rerun.rows[0]["config_hash"] == cached["config_hash"]
    verdict(capsys, 12, same, f"cell {cell.cell_id} retrained from scratch: CSV row "
            f"{'bit-identical' if same else 'differs'} (config hash {cached['config_hash']})")
