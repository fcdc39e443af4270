import zlib

import numpy as np
import pytest

from instrpred import model as M
from instrpred import numcore as nc
from instrpred.craftworld import IntervalError
from instrpred.numcore.gradcheck import check_gradients


def tiny_cfg(**kw):
    base = dict(encoder_blocks=2, decoder_blocks=1, embed_dim=16, mlp_dim=32, heads=2, max_seq_len=32,
                max_goal_len=4, max_instr_len=8, obs_feature_dim=10, obs_slots=6, obs_vocab_size=9,
                text_vocab_size=12)
    base.update(kw)
    return M.ModelConfig(**base)


def random_partition(rng, T, n):
    n = min(n, T)
    cuts = sorted(rng.choice(np.arange(2, T + 1), size=n - 1, replace=False).tolist()) if n > 1 else []
    bounds = [1] + cuts + [T + 1]
    return [(bounds[i], bounds[i + 1]) for i in range(n)]


def seq_inputs(rng, cfg, B, T, G=2):
    feats = (rng.random((B, T, cfg.obs_feature_dim)) < 0.3).astype(np.float64)
    step_mask = np.ones((B, T), dtype=bool)
    goal = rng.integers(4, cfg.text_vocab_size, size=(B, G))
    goal_mask = np.ones((B, G), dtype=bool)
    return feats, step_mask, goal, goal_mask


# ---------------------------------------------------------------- masks

def test_causal_mask_t3():
    m = M.build_causal_mask(3)
    assert [set(np.nonzero(r)[0] + 1) for r in m] == [{1}, {1, 2}, {1, 2, 3}]


def test_causal_mask_t1():
    assert M.build_causal_mask(1).tolist() == [[True]]


def test_causal_mask_empty():
    with pytest.raises(M.EmptySequenceError):
        M.build_causal_mask(0)


def test_causal_mask_predicate_sweep():
    rng = np.random.default_rng(0)
    for T in rng.integers(1, 65, size=20):
        m = M.build_causal_mask(int(T))
        for t in range(T):
            for u in range(T):
                assert m[t, u] == (u <= t)


def test_cross_mask_execution_example():
    m = M.build_instruction_cross_mask([(1, 3), (3, 6)], 5, "execution")
    assert m.tolist() == [[True, True, False, False, False], [True] * 5]


def test_cross_mask_single_instruction():
    assert M.build_instruction_cross_mask([(1, 8)], 7).all()


def test_cross_mask_onset_example():
    m = M.build_instruction_cross_mask([(1, 3), (3, 6)], 5, "onset")
    assert m.tolist() == [[True, False, False, False, False], [True, True, False, False, False]]


@pytest.mark.parametrize("intervals", [[(1, 3), (4, 6)], [(2, 6)], [(1, 3), (3, 7)], [(1, 1), (1, 6)]])
def test_cross_mask_rejects_bad_intervals(intervals):
    with pytest.raises(IntervalError):
        M.build_instruction_cross_mask(intervals, 5)


# ---------------------------------------------------------------- config and parameters

def test_config_rejects_indivisible_heads():
    with pytest.raises(M.ModelConfigError):
        M.ModelConfig(embed_dim=30, heads=4)


def test_config_defaults_match_presets():
    cfg = M.ModelConfig()
    assert (cfg.encoder_blocks, cfg.decoder_blocks, cfg.embed_dim, cfg.mlp_dim) == (4, 1, 128, 256)
    assert cfg.mask_mode == "execution"


def test_config_text_round_trip():
    cfg = tiny_cfg(mask_mode="onset", cross_mask=False, dropout=0.1)
    assert M.ModelConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("kw", [{}, {"encoder": "state"}, {"instr_block_len": 5}, {"decoder_vocab_size": 9}])
def test_parameter_count_matches_materialised(kw):
    cfg = tiny_cfg(**kw)
    params = M.init_params(cfg, 0)
    assert sum(p.size for p in params.values()) == M.parameter_count(cfg)


# ---------------------------------------------------------------- encoders

def causal_leak(cases=100, seed=1):
    """Largest change of any z_t when only observations after t are perturbed."""
    cfg = tiny_cfg()
    params = M.init_params(cfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        T = int(rng.integers(2, 20))
        feats, sm, goal, gm = seq_inputs(rng, cfg, 1, T)
        z = M.encode_sequence(params, cfg, feats, sm, goal, gm).latents.data
        t = int(rng.integers(0, T - 1))
        pert = feats.copy()
        pert[0, t + 1:] = (rng.random(pert[0, t + 1:].shape) < 0.5)
        z2 = M.encode_sequence(params, cfg, pert, sm, goal, gm).latents.data
        worst = max(worst, float(np.abs(z[0, :t + 1] - z2[0, :t + 1]).max()))
        assert np.abs(z[0, t + 1:] - z2[0, t + 1:]).max() > 0
    return worst


def test_sequence_causal_independence():
    assert causal_leak() < 1e-6


def test_first_latent_ignores_later_steps():
    cfg = tiny_cfg()
    params = M.init_params(cfg, 2, np.float64)
    rng = np.random.default_rng(2)
    feats, sm, goal, gm = seq_inputs(rng, cfg, 1, 9)
    z = M.encode_sequence(params, cfg, feats, sm, goal, gm).latents.data
    feats[0, 1:] = rng.random(feats[0, 1:].shape)
    z2 = M.encode_sequence(params, cfg, feats, sm, goal, gm).latents.data
    assert np.abs(z[0, 0] - z2[0, 0]).max() < 1e-6


def test_eval_mode_is_deterministic():
    cfg = tiny_cfg(dropout=0.1)
    params = M.init_params(cfg, 3)
    rng = np.random.default_rng(3)
    inputs = seq_inputs(rng, cfg, 2, 5)
    a = M.encode_sequence(params, cfg, *inputs).latents.data
    b = M.encode_sequence(params, cfg, *inputs).latents.data
    assert np.array_equal(a, b)


def test_training_mode_applies_dropout():
    cfg = tiny_cfg(dropout=0.5)
    params = M.init_params(cfg, 3)
    inputs = seq_inputs(np.random.default_rng(3), cfg, 2, 5)
    ev = M.encode_sequence(params, cfg, *inputs).latents.data
    tr = M.encode_sequence(params, cfg, *inputs, ctx=M.Ctx(True, np.random.default_rng(0))).latents.data
    assert not np.array_equal(ev, tr)


def test_overlong_sequence_rejected():
    cfg = tiny_cfg(max_seq_len=4)
    params = M.init_params(cfg, 0)
    with pytest.raises(M.SequenceLengthError):
        M.encode_sequence(params, cfg, *seq_inputs(np.random.default_rng(0), cfg, 1, 5))


def test_instruction_block_required_when_configured():
    cfg = tiny_cfg(instr_block_len=6)
    params = M.init_params(cfg, 0)
    with pytest.raises(M.ShapeError):
        M.encode_sequence(params, cfg, *seq_inputs(np.random.default_rng(0), cfg, 1, 3))


def test_state_encoder_shapes():
    cfg = tiny_cfg(encoder="state")
    params = M.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, cfg.obs_vocab_size, size=(3, cfg.obs_slots))
    goal = rng.integers(4, 12, size=(3, 2))
    enc = M.encode_state(params, cfg, tokens, goal, np.ones((3, 2), dtype=bool))
    assert enc.latents.shape == (3, cfg.embed_dim)
    assert enc.tokens.shape == (3, 1 + cfg.obs_slots + 2, cfg.embed_dim)
    assert M.policy_logits(params, enc).shape == (3, cfg.action_count)


def test_state_encoder_cls_sees_every_grid_token():
    cfg = tiny_cfg(encoder="state")
    params = M.init_params(cfg, 5, np.float64)
    rng = np.random.default_rng(5)
    tokens = rng.integers(0, cfg.obs_vocab_size, size=(1, cfg.obs_slots))
    goal, gm = np.array([[5, 6]]), np.ones((1, 2), dtype=bool)
    base = M.encode_state(params, cfg, tokens, goal, gm).latents.data
    for k in range(cfg.obs_slots):
        t2 = tokens.copy()
        t2[0, k] = (t2[0, k] + 1) % cfg.obs_vocab_size
        assert np.abs(M.encode_state(params, cfg, t2, goal, gm).latents.data - base).max() > 0


def test_policy_head_shape_and_shift_invariance():
    cfg = tiny_cfg()
    params = M.init_params(cfg, 0)
    enc = M.encode_sequence(params, cfg, *seq_inputs(np.random.default_rng(0), cfg, 2, 4))
    logits = M.policy_logits(params, enc).data
    assert logits.shape == (2, 4, cfg.action_count)
    assert np.array_equal(logits.argmax(-1), (logits + 3.0).argmax(-1))


# ---------------------------------------------------------------- decoder

def _decode_case(rng, cfg, params, T, n_instr, mode):
    feats, sm, goal, gm = seq_inputs(rng, cfg, 1, T)
    enc = M.encode_sequence(params, cfg, feats, sm, goal, gm)
    intervals = random_partition(rng, T, n_instr)
    R = len(intervals)
    L = int(rng.integers(1, cfg.max_instr_len + 1))
    tokens = rng.integers(1, cfg.text_vocab_size, size=(R, L))
    allow = M.build_instruction_cross_mask(intervals, T, mode)
    full = M.decode_instruction_logits(params, cfg, tokens, enc.latents, np.zeros(R, dtype=np.int64), allow).data
    caps = M.instruction_caps(intervals, mode)
    return enc, tokens, full, caps


def slicing_oracle_error(mode, cases=100, seed=7):
    """Largest gap between masked full-sequence logits and logits over explicitly sliced latents."""
    cfg = tiny_cfg(mask_mode=mode)
    params = M.init_params(cfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        T = int(rng.integers(1, 25))
        enc, tokens, full, caps = _decode_case(rng, cfg, params, T, int(rng.integers(1, 6)), mode)
        for i, cap in enumerate(caps):
            mem = enc.latents[:, :int(cap)]
            sliced = M.decode_instruction_logits(params, cfg, tokens[i:i + 1], mem, None,
                                                 np.ones((1, int(cap)), dtype=bool)).data
            worst = max(worst, float(np.abs(sliced[0] - full[i]).max()))
    return worst


@pytest.mark.parametrize("mode", ["execution", "onset"])
def test_cross_mask_matches_explicit_slicing(mode):
    assert slicing_oracle_error(mode) < 1e-6


def test_bos_only_prefix_gives_one_distribution_per_instruction():
    cfg = tiny_cfg()
    params = M.init_params(cfg, 0)
    enc = M.encode_sequence(params, cfg, *seq_inputs(np.random.default_rng(0), cfg, 1, 6))
    allow = M.build_instruction_cross_mask([(1, 3), (3, 5), (5, 7)], 6)
    out = M.decode_instruction_logits(params, cfg, np.ones((3, 1), dtype=np.int64), enc.latents,
                                      np.zeros(3, dtype=np.int64), allow)
    assert out.shape == (3, 1, cfg.text_vocab_size)


def test_decoder_tokens_never_see_later_or_foreign_tokens():
    cfg = tiny_cfg()
    params = M.init_params(cfg, 8, np.float64)
    rng = np.random.default_rng(8)
    enc = M.encode_sequence(params, cfg, *seq_inputs(rng, cfg, 1, 6))
    allow = M.build_instruction_cross_mask([(1, 4), (4, 7)], 6)
    idx = np.zeros(2, dtype=np.int64)
    tokens = rng.integers(1, 12, size=(2, 6))
    base = M.decode_instruction_logits(params, cfg, tokens, enc.latents, idx, allow).data
    t2 = tokens.copy()
    t2[0, 3:] = rng.integers(1, 12, size=3)
    t2[1] = rng.integers(1, 12, size=6)
    out = M.decode_instruction_logits(params, cfg, t2, enc.latents, idx, allow).data
    assert np.abs(out[0, :3] - base[0, :3]).max() < 1e-12


def test_cross_mask_extent_mismatch_is_shape_error():
    cfg = tiny_cfg()
    params = M.init_params(cfg, 0)
    enc = M.encode_sequence(params, cfg, *seq_inputs(np.random.default_rng(0), cfg, 1, 4))
    with pytest.raises(M.ShapeError):
        M.decode_instruction_logits(params, cfg, np.ones((1, 2), dtype=np.int64), enc.latents, None,
                                    np.ones((1, 5), dtype=bool))


def test_greedy_decode_stops_on_eos_run():
    cfg = tiny_cfg(decoder_blocks=1)
    params = M.init_params(cfg, 0)
    # bias the output towards EOS so decoding terminates immediately
    params["dec.out.b"].data[2] = 50.0
    enc = M.encode_sequence(params, cfg, *seq_inputs(np.random.default_rng(0), cfg, 1, 3))
    allow = np.ones((1, 3), dtype=bool)
    assert M.greedy_decode(params, cfg, enc.latents, None, allow) == [[]]
    assert M.greedy_decode(params, cfg, enc.latents, None, allow, eos_run=2) == [[]]


# ---------------------------------------------------------------- gradients

def end_to_end_gradient_error(max_entries=6):
    """Sampled finite-difference check of the joint loss through every model parameter."""
    cfg = tiny_cfg(embed_dim=16, heads=2, text_vocab_size=12, mlp_dim=24, max_instr_len=5)
    params = M.init_params(cfg, 11, np.float64)
    for p in params.values():  # move off the symmetric init so every path carries signal
        p.data += np.random.default_rng(zlib.crc32(p.name.encode())).normal(0, 0.05, p.shape)
    rng = np.random.default_rng(11)
    feats, sm, goal, gm = seq_inputs(rng, cfg, 2, 4)
    sm[1, 3:] = False
    actions = rng.integers(0, cfg.action_count, size=(2, 4))
    actions[1, 3:] = -1
    intervals = np.array([[1, 3], [3, 5], [1, 4]])
    rows = np.array([0, 0, 1])
    x_in = rng.integers(1, 12, size=(3, 4))
    x_out = rng.integers(2, 12, size=(3, 4))
    x_out[2, 2:] = 0

    def loss():
        enc = M.encode_sequence(params, cfg, feats, sm, goal, gm)
        a = nc.cross_entropy_logits(M.policy_logits(params, enc), actions, ignore_index=-1)
        allow = M.sequence_cross_allow(intervals, sm.sum(1)[rows], 4, cfg)
        d = M.decode_instruction_logits(params, cfg, x_in, enc.latents, rows, allow)
        return a + nc.cross_entropy_logits(d, x_out, ignore_index=0) * 0.5

    return check_gradients(loss, list(params.values()), h=1e-5, max_entries=max_entries,
                           rng=np.random.default_rng(0))


def test_end_to_end_gradcheck():
    assert end_to_end_gradient_error() < 1e-4
