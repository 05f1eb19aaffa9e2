"""Golden (unfused, order-preserving) decoder-block operations.

High-precision oracles: mpmath for attention softmax, math.fsum for
moment sums, and an inline re-composition of the block from its
sub-operations for the bitwise fixture.
"""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neoxfuse.config import ModelConfig, preset
from neoxfuse.golden import (
    SoftmaxState,
    attend_naive,
    attention_scale,
    decoder_block_golden,
    finalize_state,
    gelu_exact,
    gelu_tanh,
    layernorm_single_pass,
    layernorm_two_pass,
    merge_states,
    mlp,
    prefill_attention_tiled,
    qkv_project,
    rope_partial,
    rope_partial_inverse,
    softmax_state,
)
from neoxfuse.weights import KVCache, synth_weights

EPS = 1e-5


# ---------------------------------------------------------------------------
# LayerNorm.

def _ln_oracle(x, gain, bias, eps):
    """fsum-based reference with exact mean/variance accumulation."""
    n = len(x)
    mean = math.fsum(x) / n
    var = math.fsum((v - mean) ** 2 for v in x) / n
    return gain * (np.asarray(x) - mean) / math.sqrt(var + eps) + bias


def test_layernorm_two_pass_matches_fsum_oracle():
    rng = np.random.default_rng(0)
    for n in (2, 17, 2560):
        x = rng.standard_normal(n) * 3
        gain = 1 + 0.1 * rng.standard_normal(n)
        bias = 0.1 * rng.standard_normal(n)
        want = _ln_oracle(x, gain, bias, EPS)
        got = layernorm_two_pass(x, gain, bias, EPS)
        assert np.max(np.abs(got - want)) <= 1e-12 * max(1, np.max(np.abs(want)))


def test_layernorm_single_vs_two_pass_random():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 2561))
        x = rng.standard_normal(n) * float(rng.uniform(0.5, 5))
        gain = np.ones(n)
        bias = np.zeros(n)
        a = layernorm_single_pass(x, gain, bias, EPS)
        b = layernorm_two_pass(x, gain, bias, EPS)
        scale = np.max(np.abs(b)) + 1e-30
        worst = max(worst, float(np.max(np.abs(a - b))) / scale)
    assert worst <= 1e-6


def test_layernorm_large_mean_adversarial():
    """Mean ~1e4 wrecks naive E[x^2]-E[x]^2 unless done carefully."""
    rng = np.random.default_rng(2)
    x = 10000.0 + rng.standard_normal(2560)
    a = layernorm_single_pass(x, np.ones(2560), np.zeros(2560), EPS)
    b = layernorm_two_pass(x, np.ones(2560), np.zeros(2560), EPS)
    assert np.max(np.abs(a - b)) / np.max(np.abs(b)) <= 1e-3


@given(st.floats(-100, 100))
def test_layernorm_shift_invariance(c):
    x = np.array([0.3, -1.2, 4.0, 2.5, -0.7])
    gain, bias = np.ones(5), np.zeros(5)
    a = layernorm_two_pass(x, gain, bias, EPS)
    b = layernorm_two_pass(x + c, gain, bias, EPS)
    assert np.max(np.abs(a - b)) <= 1e-9


def test_layernorm_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        layernorm_two_pass(np.array([1.0, np.inf]), np.ones(2), np.zeros(2), EPS)
    with pytest.raises(ValueError, match="non-finite"):
        layernorm_single_pass(np.array([np.nan, 0.0]), np.ones(2), np.zeros(2), EPS)


# ---------------------------------------------------------------------------
# QKV projection (interleaved per-head layout).

def test_qkv_interleaved_layout_oracle():
    """Oracle: pick each head's rows straight out of the weight matrix."""
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(cfg.hidden)
    q, k, v = qkv_project(x, w, cfg)
    d = cfg.d_head
    for h in range(cfg.n_heads):
        base = h * 3 * d
        rows = w.qkv_weight[base:base + 3 * d]
        bias = w.qkv_bias[base:base + 3 * d]
        y = rows @ x + bias
        assert np.array_equal(q[h], y[:d])
        assert np.array_equal(k[h], y[d:2 * d])
        assert np.array_equal(v[h], y[2 * d:])


# ---------------------------------------------------------------------------
# Rotary embedding.

def test_rope_frozen_small_case():
    # rotary_dims=2 pairs element 0 with element 1 at angle pos * 1.0 rad
    v = np.array([1.0, 0.0, 7.5])
    out = rope_partial(v, pos=1, rotary_dims=2)
    assert out[0] == pytest.approx(math.cos(1.0), abs=1e-15)
    assert out[1] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert out[2] == 7.5  # bitwise pass-through


@given(st.integers(0, 4096))
def test_rope_preserves_pair_norms(pos):
    rng = np.random.default_rng(4)
    v = rng.standard_normal(16)
    out = rope_partial(v, pos, rotary_dims=8)
    for i in range(4):
        a = math.hypot(v[i], v[i + 4])
        b = math.hypot(out[i], out[i + 4])
        assert abs(a - b) <= 1e-12 * max(1.0, a)


@given(st.integers(0, 4096))
def test_rope_inverse_round_trip(pos):
    rng = np.random.default_rng(5)
    v = rng.standard_normal(16)
    back = rope_partial_inverse(rope_partial(v, pos, 8), pos, 8)
    assert np.max(np.abs(back - v)) <= 1e-11


def test_rope_position_zero_identity():
    v = np.random.default_rng(6).standard_normal(8)
    assert np.array_equal(rope_partial(v, 0, 4), v)


def test_rope_angle_additivity():
    v = np.random.default_rng(7).standard_normal(8)
    a = rope_partial(rope_partial(v, 3, 4), 11, 4)
    b = rope_partial(v, 14, 4)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_rope_pass_through_is_bitwise():
    v = np.array([0.1, 0.2, 0.3, np.pi, -np.e, 1e-300])
    out = rope_partial(v, 17, 2)
    assert np.array_equal(out[2:], v[2:])


def test_rope_rejects_bad_dims():
    v = np.zeros(8)
    with pytest.raises(ValueError):
        rope_partial(v, 1, 3)  # odd
    with pytest.raises(ValueError):
        rope_partial(v, 1, 10)  # larger than the vector


# ---------------------------------------------------------------------------
# Attention.

def _attend_oracle_mp(q, keys, values, scale):
    """50-digit softmax attention."""
    with mpmath.workdps(50):
        scores = [
            mpmath.fsum(mpmath.mpf(qi) * mpmath.mpf(ki) for qi, ki in zip(q, k))
            * mpmath.mpf(scale)
            for k in keys
        ]
        m = max(scores)
        w = [mpmath.e ** (s - m) for s in scores]
        z = mpmath.fsum(w)
        out = []
        for j in range(values.shape[1]):
            out.append(float(
                mpmath.fsum(wi * mpmath.mpf(values[i, j]) for i, wi in enumerate(w)) / z
            ))
    return np.array(out)


def test_attend_naive_matches_mpmath_oracle():
    rng = np.random.default_rng(8)
    q = rng.standard_normal(16)
    keys = rng.standard_normal((37, 16))
    values = rng.standard_normal((37, 16))
    scale = 1 / 4.0
    want = _attend_oracle_mp(q, keys, values, scale)
    got = attend_naive(q, keys, values, scale)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_attend_single_key_returns_value_row():
    q = np.array([3.0, -1.0])
    keys = np.array([[0.5, 0.5]])
    values = np.array([[7.0, -2.0]])
    assert np.array_equal(attend_naive(q, keys, values, 1.0), values[0])


def test_attend_uniform_scores_average_values():
    q = np.zeros(4)
    keys = np.random.default_rng(9).standard_normal((6, 4))
    values = np.arange(24, dtype=float).reshape(6, 4)
    got = attend_naive(q, keys, values, 0.25)
    assert np.max(np.abs(got - values.mean(axis=0))) <= 1e-14


def test_attend_empty_cache_rejected():
    with pytest.raises(ValueError, match="empty"):
        attend_naive(np.zeros(2), np.zeros((0, 2)), np.zeros((0, 2)), 1.0)


def test_merge_states_matches_joint_state():
    rng = np.random.default_rng(10)
    q = rng.standard_normal(8)
    keys = rng.standard_normal((20, 8))
    values = rng.standard_normal((20, 8))
    joint = softmax_state(q, keys, values, 0.5)
    a = softmax_state(q, keys[:13], values[:13], 0.5)
    b = softmax_state(q, keys[13:], values[13:], 0.5)
    merged = merge_states(a, b)
    assert abs(merged.m - joint.m) == 0.0
    assert abs(merged.l - joint.l) <= 1e-12 * joint.l
    assert np.max(np.abs(finalize_state(merged) - finalize_state(joint))) <= 1e-13


def test_merge_with_empty_state_is_identity():
    rng = np.random.default_rng(11)
    q = rng.standard_normal(4)
    s = softmax_state(q, rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), 1.0)
    e = SoftmaxState.empty(4)
    for merged in (merge_states(s, e), merge_states(e, s)):
        assert merged.m == s.m and merged.l == s.l
        assert np.array_equal(merged.o, s.o)


def test_finalize_empty_state_rejected():
    with pytest.raises(ValueError, match="empty attention state"):
        finalize_state(SoftmaxState.empty(3))


# ---------------------------------------------------------------------------
# GELU and MLP.

def test_gelu_known_values():
    assert gelu_exact(np.array([0.0]))[0] == 0.0
    assert gelu_exact(np.array([100.0]))[0] == pytest.approx(100.0)
    assert gelu_exact(np.array([-100.0]))[0] == pytest.approx(0.0, abs=1e-12)
    # gelu(1) with the exact erf formulation
    assert gelu_exact(np.array([1.0]))[0] == pytest.approx(0.8413447460685429, abs=1e-12)


def test_gelu_tanh_tracks_exact():
    x = np.arange(-8, 8, 1e-3)
    worst = np.max(np.abs(gelu_tanh(x) - gelu_exact(x)))
    # frozen bound: measured max ~4.74e-4 near |x| ~ 2.7
    assert worst <= 5e-4


def test_mlp_is_down_gelu_up_composition():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=12)
    x = np.random.default_rng(12).standard_normal(cfg.hidden)
    want = w.down_weight @ gelu_tanh(w.up_weight @ x + w.up_bias) + w.down_bias
    assert np.array_equal(mlp(x, w, "tanh"), want)


def test_mlp_unknown_variant():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=0)
    with pytest.raises(ValueError, match="gelu"):
        mlp(np.zeros(cfg.hidden), w, "fancy")


# ---------------------------------------------------------------------------
# The block.

def test_block_bitwise_composition_fixture():
    """Recompose the block from public sub-operations; must match bitwise."""
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=13)
    rng = np.random.default_rng(13)
    cache = KVCache(cfg.n_heads, cfg.d_head)
    ref_cache = KVCache(cfg.n_heads, cfg.d_head)
    scale = attention_scale(cfg)
    for pos in range(5):
        x = rng.standard_normal(cfg.hidden) * 0.5

        normed = layernorm_two_pass(x, w.ln1_gain, w.ln1_bias, cfg.ln_eps)
        q, k, v = qkv_project(normed, w, cfg)
        rd = cfg.rotary_dims
        q = np.stack([rope_partial(q[h], pos, rd, cfg.theta_base)
                      for h in range(cfg.n_heads)])
        k = np.stack([rope_partial(k[h], pos, rd, cfg.theta_base)
                      for h in range(cfg.n_heads)])
        ref_cache.append(k, v)
        ctx = np.empty(cfg.hidden)
        for h in range(cfg.n_heads):
            keys, values = ref_cache.head(h)
            ctx[h * cfg.d_head:(h + 1) * cfg.d_head] = attend_naive(
                q[h], keys, values, scale)
        attn_res = x + w.out_weight @ ctx + w.out_bias
        ln2_in = x if cfg.parallel_residual else attn_res
        normed2 = layernorm_two_pass(ln2_in, w.ln2_gain, w.ln2_bias, cfg.ln_eps)
        want = attn_res + mlp(normed2, w, "tanh")

        got = decoder_block_golden(x, w, cache, pos, cfg, "tanh")
        assert np.array_equal(got, want), f"pos {pos}"
    assert np.array_equal(cache.keys(), ref_cache.keys())
    assert np.array_equal(cache.values(), ref_cache.values())


def test_block_sequential_residual_mode():
    cfg = preset("tiny").with_(parallel_residual=False)
    w = synth_weights(cfg, seed=14)
    cache = KVCache(cfg.n_heads, cfg.d_head)
    x = np.random.default_rng(14).standard_normal(cfg.hidden)
    out = decoder_block_golden(x, w, cache, 0, cfg)
    assert np.all(np.isfinite(out))
    # sequential mode must differ from parallel mode on the same inputs
    cfg_p = preset("tiny")
    cache_p = KVCache(cfg.n_heads, cfg.d_head)
    out_p = decoder_block_golden(x, w, cache_p, 0, cfg_p)
    assert not np.array_equal(out, out_p)


def test_block_position_must_match_cache():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=15)
    cache = KVCache(cfg.n_heads, cfg.d_head)
    with pytest.raises(ValueError, match="cache"):
        decoder_block_golden(np.zeros(cfg.hidden), w, cache, 3, cfg)


# ---------------------------------------------------------------------------
# Tiled prefill.

def _prefill_naive(Q, K, V, scale):
    return np.stack([
        attend_naive(Q[i], K[: i + 1], V[: i + 1], scale) for i in range(len(Q))
    ])


@pytest.mark.parametrize("seq", [1, 5, 37, 128])
def test_prefill_tile_invariance(seq):
    rng = np.random.default_rng(seq)
    d = 16
    Q = rng.standard_normal((seq, d))
    K = rng.standard_normal((seq, d))
    V = rng.standard_normal((seq, d))
    scale = 1 / 4.0
    want = _prefill_naive(Q, K, V, scale)
    for tile in (1, 3, 16, seq):
        got = prefill_attention_tiled(Q, K, V, tile, scale=scale)
        rel = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-30))
        assert rel <= 1e-10, f"tile {tile}"


def test_prefill_rejects_bad_tile():
    Q = np.zeros((4, 2))
    with pytest.raises(ValueError):
        prefill_attention_tiled(Q, Q, Q, 0)
