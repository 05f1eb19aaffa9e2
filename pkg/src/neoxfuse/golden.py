"""Golden single-token decoder block: unfused, float64, oracle-grade.

This is the reference semantics every fused/clustered execution path is
checked against.  The block follows the GPT-NeoX shape: layernorm ->
interleaved QKV projection -> partial rotary embedding -> causal attention
over an append-only KV cache -> output projection -> layernorm -> GELU MLP,
with either a parallel residual (default: attention and MLP branches both
read the block input) or a sequential one.

``layernorm_two_pass`` is the high-precision baseline (explicit mean, then
population variance of the residuals); ``layernorm_single_pass`` models the
fused kernel's one-sweep moment accumulation Var[x] = E[x^2] - E[x]^2 with
the variance clamped at zero.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .config import ModelConfig
from .weights import BlockWeights, KVCache


# ---------------------------------------------------------------------------
# Layer normalisation.

def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite activation")


def layernorm_two_pass(x, gain, bias, eps: float) -> np.ndarray:
    """Mean first, then population variance of the centered values."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    mu = x.mean()
    var = np.mean((x - mu) ** 2)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def layernorm_single_pass(x, gain, bias, eps: float) -> np.ndarray:
    """One-sweep moments: Var[x] = E[x^2] - E[x]^2, clamped at zero."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    mu = x.mean()
    var = max(np.mean(x * x) - mu * mu, 0.0)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


# ---------------------------------------------------------------------------
# Projections and rotary embedding.

def qkv_project(x_normed, w: BlockWeights, cfg: ModelConfig):
    """Interleaved QKV projection.

    Returns (q, k, v), each [n_heads, d_head].  Head h owns the contiguous
    rows [h*3*d_head, (h+1)*3*d_head) of ``qkv_weight`` as Q rows, K rows,
    V rows in that order.
    """
    y = w.qkv_weight @ np.asarray(x_normed, dtype=np.float64) + w.qkv_bias
    d = cfg.d_head
    per_head = y.reshape(cfg.n_heads, 3 * d)
    return per_head[:, :d].copy(), per_head[:, d:2 * d].copy(), per_head[:, 2 * d:].copy()


def rope_angles(pos: int, rotary_dims: int, theta_base: float) -> np.ndarray:
    """Angle for pair i is pos * theta_base ** (-2 i / rotary_dims)."""
    i = np.arange(rotary_dims // 2, dtype=np.float64)
    return pos * theta_base ** (-2.0 * i / rotary_dims)


def rope_partial(v, pos: int, rotary_dims: int, theta_base: float = 10000.0) -> np.ndarray:
    """Rotate the first ``rotary_dims`` components of a head vector.

    Pairing is (i, i + rotary_dims/2) for i in [0, rotary_dims/2); the
    remaining components pass through bitwise unchanged.
    """
    v = np.asarray(v, dtype=np.float64)
    if rotary_dims < 2 or rotary_dims % 2:
        raise ValueError("rotary_dims must be an even number >= 2")
    if rotary_dims > v.shape[-1]:
        raise ValueError("rotary_dims exceeds head size")
    half = rotary_dims // 2
    theta = rope_angles(pos, rotary_dims, theta_base)
    cos, sin = np.cos(theta), np.sin(theta)
    out = v.copy()
    a, b = v[..., :half], v[..., half:rotary_dims]
    out[..., :half] = a * cos - b * sin
    out[..., half:rotary_dims] = a * sin + b * cos
    return out


def rope_partial_inverse(v, pos: int, rotary_dims: int, theta_base: float = 10000.0) -> np.ndarray:
    """Inverse rotation (same pairing, negated angle)."""
    return rope_partial(v, -pos, rotary_dims, theta_base)


# ---------------------------------------------------------------------------
# Attention.

@dataclass
class SoftmaxState:
    """Running-softmax partial state: row max m, sum l, weighted values o."""

    m: float
    l: float
    o: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "SoftmaxState":
        return cls(m=-math.inf, l=0.0, o=np.zeros(d))


def softmax_state(q, keys, values, scale: float) -> SoftmaxState:
    """Two-pass max-subtracted softmax state over one contiguous KV slice."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape[0] == 0:
        return SoftmaxState.empty(values.shape[-1] if values.ndim == 2 else 0)
    logits = keys @ np.asarray(q, dtype=np.float64) * scale
    m = float(np.max(logits))
    weights = np.exp(logits - m)
    return SoftmaxState(m=m, l=float(np.sum(weights)), o=weights @ values)


def merge_states(a: SoftmaxState, b: SoftmaxState) -> SoftmaxState:
    """Combine two partial states with the log-sum-exp rescaling rule."""
    if a.l == 0.0:
        return SoftmaxState(b.m, b.l, b.o.copy())
    if b.l == 0.0:
        return SoftmaxState(a.m, a.l, a.o.copy())
    m = max(a.m, b.m)
    fa, fb = math.exp(a.m - m), math.exp(b.m - m)
    return SoftmaxState(m=m, l=a.l * fa + b.l * fb, o=a.o * fa + b.o * fb)


def finalize_state(s: SoftmaxState) -> np.ndarray:
    if s.l == 0.0:
        raise ValueError("empty attention state")
    return s.o / s.l


def attend_naive(q, keys, values, scale: float) -> np.ndarray:
    """Full softmax attention for one head over the whole cache slice."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] == 0:
        raise ValueError("attention over empty cache")
    return finalize_state(softmax_state(q, keys, values, scale))


# ---------------------------------------------------------------------------
# MLP.

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu_exact(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_tanh(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))


_GELU = {"exact": gelu_exact, "tanh": gelu_tanh}


def mlp(x_normed, w: BlockWeights, gelu: str = "tanh") -> np.ndarray:
    """down_proj(gelu(up_proj(x) + up_bias)) + down_bias."""
    try:
        act = _GELU[gelu]
    except KeyError:
        raise ValueError(f"unknown gelu variant {gelu!r} (use 'exact' or 'tanh')") from None
    h = w.up_weight @ np.asarray(x_normed, dtype=np.float64) + w.up_bias
    return w.down_weight @ act(h) + w.down_bias


# ---------------------------------------------------------------------------
# Whole block.

def attention_scale(cfg: ModelConfig) -> float:
    return 1.0 / math.sqrt(cfg.d_head)


def decoder_block_golden(
    x,
    w: BlockWeights,
    cache: KVCache,
    pos: int,
    cfg: ModelConfig,
    gelu: str = "tanh",
) -> np.ndarray:
    """One decode step of the unfused block; appends this step's KV.

    ``cache`` must hold exactly the history for positions < pos.  With
    ``cfg.parallel_residual`` (the default) the output is
    x + attention(ln1(x)) + mlp(ln2(x)); sequentially it is
    r = x + attention(ln1(x)), then r + mlp(ln2(r)).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.hidden,):
        raise ValueError(f"input must have shape ({cfg.hidden},)")
    if len(cache) != pos:
        raise ValueError(f"cache holds {len(cache)} positions, expected {pos}")

    normed1 = layernorm_two_pass(x, w.ln1_gain, w.ln1_bias, cfg.ln_eps)
    q, k, v = qkv_project(normed1, w, cfg)
    rd, tb = cfg.rotary_dims, cfg.theta_base
    q = rope_partial(q, pos, rd, tb)
    k = rope_partial(k, pos, rd, tb)
    cache.append(k, v)

    scale = attention_scale(cfg)
    context = np.empty(cfg.hidden)
    for h in range(cfg.n_heads):
        keys, values = cache.head(h)
        context[h * cfg.d_head:(h + 1) * cfg.d_head] = attend_naive(
            q[h], keys, values, scale
        )
    attn_res = x + w.out_weight @ context + w.out_bias

    ln2_in = x if cfg.parallel_residual else attn_res
    normed2 = layernorm_two_pass(ln2_in, w.ln2_gain, w.ln2_bias, cfg.ln_eps)
    return attn_res + mlp(normed2, w, gelu)


# ---------------------------------------------------------------------------
# Tiled prefill attention.

def prefill_attention_tiled(
    Q, K, V, tile: int, causal: bool = True, scale: float | None = None
) -> np.ndarray:
    """Causal attention over full sequences, processing keys in tiles.

    Q, K, V are [seq, d_head] for a single head.  Keys are consumed in
    blocks of ``tile`` positions, folding each block into a running
    SoftmaxState per query row; the result is tile-size independent up to
    floating-point merge order (within 1e-10 of any other tile size).
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 2 or K.shape != Q.shape or V.shape != Q.shape:
        raise ValueError("Q, K, V must share shape [seq, d_head]")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    seq, d = Q.shape
    if scale is None:
        scale = 1.0 / math.sqrt(d)

    out = np.empty((seq, d))
    for i in range(seq):
        limit = i + 1 if causal else seq
        state = SoftmaxState.empty(d)
        for t0 in range(0, limit, tile):
            t1 = min(t0 + tile, limit)
            state = merge_states(
                state, softmax_state(Q[i], K[t0:t1], V[t0:t1], scale)
            )
        out[i] = finalize_state(state)
    return out
