"""Cluster simulator: split-KV attention, atomic output projection,
fused block stepping, execution traces, and byte accounting."""

import itertools
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neoxfuse.cluster import (
    ClusterSpec,
    attend_split,
    fused_block_step,
    output_project_atomic,
    partition_kv,
    trace_to_jsonl,
)
from neoxfuse.config import preset
from neoxfuse.golden import attend_naive, decoder_block_golden
from neoxfuse.halfnum import RING, TREE, Precision
from neoxfuse.plans import (
    Kernel,
    FusionPlan,
    Op,
    PIPELINE,
    kernel_layer_bytes,
    plan_baseline,
    plan_from_splits,
    plan_full_fused,
    plan_mlp_down_only,
)
from neoxfuse.weights import KVCache, synth_weights


# ---------------------------------------------------------------------------
# KV partitioning.

@given(st.integers(0, 500), st.integers(1, 32))
def test_partition_covers_contiguously(seq, nb):
    parts = partition_kv(seq, nb)
    assert len(parts) == nb
    assert parts[0][0] == 0
    assert parts[-1][1] == seq
    for (s0, e0), (s1, e1) in zip(parts, parts[1:]):
        assert e0 == s1
        assert e0 >= s0 and e1 >= s1
    sizes = [e - s for s, e in parts]
    assert max(sizes) - min(sizes) <= 1
    if nb <= seq:
        assert min(sizes) >= 1


def test_partition_rejects_bad_args():
    with pytest.raises(ValueError):
        partition_kv(-1, 2)
    with pytest.raises(ValueError):
        partition_kv(4, 0)


# ---------------------------------------------------------------------------
# Split attention.

def test_single_block_is_bitwise_naive():
    rng = np.random.default_rng(0)
    q = rng.standard_normal(16)
    K = rng.standard_normal((37, 16))
    V = rng.standard_normal((37, 16))
    out, _ = attend_split(q, K, V, ClusterSpec(n_blocks=1), 0.25)
    assert np.array_equal(out, attend_naive(q, K, V, 0.25))


def test_exact_split_matches_naive_over_grid():
    rng = np.random.default_rng(1)
    worst = 0.0
    for seq in (1, 2, 3, 7, 64, 512):
        q = rng.standard_normal(16)
        K = rng.standard_normal((seq, 16))
        V = rng.standard_normal((seq, 16))
        ref = attend_naive(q, K, V, 0.25)
        for nb in (1, 2, 3, 4, 8, 16):
            for strat in (RING, TREE):
                spec = ClusterSpec(nb, strat, Precision.EXACT)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    out, _ = attend_split(q, K, V, spec, 0.25)
                worst = max(worst, float(np.max(
                    np.abs(out - ref) / np.maximum(np.abs(ref), 1e-30))))
    assert worst <= 1e-10


def test_exact_merge_is_strategy_and_seed_free():
    rng = np.random.default_rng(2)
    q = rng.standard_normal(8)
    K = rng.standard_normal((40, 8))
    V = rng.standard_normal((40, 8))
    base, _ = attend_split(q, K, V, ClusterSpec(4, RING, Precision.EXACT), 0.5)
    for strat in (TREE, RING):
        out, _ = attend_split(q, K, V, ClusterSpec(4, strat, Precision.EXACT), 0.5)
        assert np.array_equal(out, base)


def test_fp16_mode_split_stays_close():
    rng = np.random.default_rng(3)
    q = rng.standard_normal(8)
    K = rng.standard_normal((33, 8))
    V = rng.standard_normal((33, 8))
    ref = attend_naive(q, K, V, 0.5)
    out, _ = attend_split(
        q, K, V, ClusterSpec(4, RING, Precision.FP16, atomic_seed=7), 0.5)
    # merges stay float64; only ordering differs from the naive sweep
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_split_empty_cache_rejected():
    with pytest.raises(ValueError, match="empty"):
        attend_split(np.zeros(4), np.zeros((0, 4)), np.zeros((0, 4)),
                     ClusterSpec(2), 1.0)


def test_tree_fallback_warns_for_non_power_of_two():
    rng = np.random.default_rng(4)
    q = rng.standard_normal(4)
    K = rng.standard_normal((12, 4))
    V = rng.standard_normal((12, 4))
    with pytest.warns(RuntimeWarning, match="power-of-two"):
        out, trace = attend_split(q, K, V, ClusterSpec(3, TREE), 0.5)
    assert trace.sync_steps == 2  # ring fallback on 3 blocks


def test_attend_trace_counters():
    rng = np.random.default_rng(5)
    q = rng.standard_normal(16)
    K = rng.standard_normal((37, 16))
    V = rng.standard_normal((37, 16))
    _, t4 = attend_split(q, K, V, ClusterSpec(4, TREE), 0.25)
    assert t4.sync_steps == 2
    assert t4.dsmem_exchanges == 3
    assert t4.bytes_offchip == 2 * 37 * 16 * 2
    assert t4.bytes_onchip == 3 * (16 + 2) * 4
    _, t8 = attend_split(q, K, V, ClusterSpec(8, RING), 0.25)
    assert t8.sync_steps == 7


# ---------------------------------------------------------------------------
# Atomic output projection.

def test_output_projection_exact_matches_fsum():
    rng = np.random.default_rng(6)
    partials = rng.standard_normal((5, 8))
    W = rng.standard_normal((8, 8))
    b = rng.standard_normal(8)
    res = rng.standard_normal(8)
    got = output_project_atomic(partials, W, b, res, ClusterSpec(5))
    proj = partials @ W.T
    want = np.array([
        res[j] + b[j] + math.fsum(proj[:, j]) for j in range(8)
    ])
    assert np.max(np.abs(got - want)) <= 1e-12


def test_output_projection_fp16_order_dependence():
    partials = np.zeros((3, 4))
    partials[0, 0] = 1.0
    partials[1, 0] = 2.0 ** -11
    partials[2, 0] = 2.0 ** -11
    W = np.eye(4)
    zero = np.zeros(4)
    seen = set()
    for seed in range(100):
        spec = ClusterSpec(3, accumulation_precision=Precision.FP16,
                           atomic_seed=seed)
        seen.add(float(output_project_atomic(partials, W, zero, zero, spec)[0]))
    assert seen == {1.0, 1.0009765625}


def test_output_projection_single_block_seed_free():
    rng = np.random.default_rng(7)
    partials = rng.standard_normal((1, 4))
    W = rng.standard_normal((4, 4))
    b, res = rng.standard_normal(4), rng.standard_normal(4)
    outs = {
        output_project_atomic(
            partials, W, b, res,
            ClusterSpec(1, accumulation_precision=Precision.FP16, atomic_seed=s),
        ).tobytes()
        for s in range(10)
    }
    assert len(outs) == 1


@given(st.integers(2, 6), st.integers(0, 20))
def test_output_projection_fp16_perturbation_bound(n_blocks, seed):
    """FP16 result stays within (n_blocks+1) half-ulps of the exact sum."""
    rng = np.random.default_rng(seed)
    partials = rng.uniform(-4, 4, size=(n_blocks, 3))
    W = np.eye(3)
    zero = np.zeros(3)
    spec = ClusterSpec(n_blocks, accumulation_precision=Precision.FP16,
                       atomic_seed=seed)
    got = output_project_atomic(partials, W, zero, zero, spec)
    exact = partials.sum(axis=0)
    bound_scale = np.abs(partials).sum(axis=0)
    for j in range(3):
        ulp = float(np.spacing(np.float16(max(bound_scale[j], 1e-3))))
        assert abs(got[j] - exact[j]) <= (n_blocks + 1) * ulp


# ---------------------------------------------------------------------------
# Fused block stepping.

def _decode_histories(cfg, w, steps, rng):
    """Run some golden steps to build a populated cache."""
    cache = KVCache(cfg.n_heads, cfg.d_head)
    for t in range(steps):
        decoder_block_golden(rng.standard_normal(cfg.hidden) * 0.5,
                             w, cache, t, cfg)
    return cache


@pytest.mark.parametrize("n_blocks", [1, 2, 4, 7])
def test_fused_step_matches_golden_exact(n_blocks):
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=8)
    rng = np.random.default_rng(8)
    cache = _decode_histories(cfg, w, 9, rng)
    x = rng.standard_normal(cfg.hidden) * 0.5
    gold_cache = KVCache.from_arrays(cache.keys(), cache.values())
    want = decoder_block_golden(x, w, gold_cache, 9, cfg)
    spec = ClusterSpec(n_blocks=n_blocks, reduction=RING,
                       accumulation_precision=Precision.EXACT)
    test_cache = KVCache.from_arrays(cache.keys(), cache.values())
    got, _ = fused_block_step(x, w, test_cache, 9, cfg, spec, plan_full_fused())
    rel = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12))
    assert rel <= 1e-8
    assert np.array_equal(test_cache.keys(), gold_cache.keys())


def test_fused_step_wide_model():
    cfg = preset("pythia-2.8b").with_(n_layers=1)
    w = synth_weights(cfg, seed=9)
    rng = np.random.default_rng(9)
    cache = KVCache(cfg.n_heads, cfg.d_head)
    x0 = rng.standard_normal(cfg.hidden) * 0.5
    decoder_block_golden(x0, w, cache, 0, cfg)
    x = rng.standard_normal(cfg.hidden) * 0.5
    gold_cache = KVCache.from_arrays(cache.keys(), cache.values())
    want = decoder_block_golden(x, w, gold_cache, 1, cfg)
    test_cache = KVCache.from_arrays(cache.keys(), cache.values())
    got, _ = fused_block_step(x, w, test_cache, 1, cfg,
                              ClusterSpec(n_blocks=2), plan_full_fused())
    rel = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12))
    assert rel <= 1e-8


def test_fused_step_fp16_perturbation_is_small():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=10)
    rng = np.random.default_rng(10)
    cache = _decode_histories(cfg, w, 6, rng)
    x = rng.standard_normal(cfg.hidden) * 0.3
    gold_cache = KVCache.from_arrays(cache.keys(), cache.values())
    want = decoder_block_golden(x, w, gold_cache, 6, cfg)
    spec = ClusterSpec(4, RING, Precision.FP16, atomic_seed=3)
    test_cache = KVCache.from_arrays(cache.keys(), cache.values())
    got, _ = fused_block_step(x, w, test_cache, 6, cfg, spec, plan_full_fused())
    assert np.max(np.abs(got - want)) <= 0.01
    assert not np.array_equal(got, want)


def test_fused_step_position_check():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=11)
    cache = KVCache(cfg.n_heads, cfg.d_head)
    with pytest.raises(ValueError, match="cache"):
        fused_block_step(np.zeros(cfg.hidden), w, cache, 2, cfg,
                         ClusterSpec(2), plan_full_fused())


def test_trace_reproducible_and_jsonl_format():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=12)
    rng = np.random.default_rng(12)
    cache = _decode_histories(cfg, w, 4, rng)
    x = rng.standard_normal(cfg.hidden)
    spec = ClusterSpec(4, TREE)
    c1 = KVCache.from_arrays(cache.keys(), cache.values())
    c2 = KVCache.from_arrays(cache.keys(), cache.values())
    _, t1 = fused_block_step(x, w, c1, 4, cfg, spec, plan_baseline())
    _, t2 = fused_block_step(x, w, c2, 4, cfg, spec, plan_baseline())
    assert trace_to_jsonl(t1) == trace_to_jsonl(t2)

    lines = trace_to_jsonl(t1).strip().split("\n")
    assert len(lines) == 7  # one record per baseline kernel
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"name", "bytes_offchip", "bytes_onchip", "sync_steps"}
        assert rec["bytes_offchip"] >= 0


def test_fused_trace_aggregates():
    cfg = preset("tiny")
    w = synth_weights(cfg, seed=13)
    rng = np.random.default_rng(13)
    cache = _decode_histories(cfg, w, 4, rng)
    x = rng.standard_normal(cfg.hidden)
    c1 = KVCache.from_arrays(cache.keys(), cache.values())
    _, tr = fused_block_step(x, w, c1, 4, cfg, ClusterSpec(4, TREE),
                             plan_full_fused())
    assert tr.kernel_count == 1
    assert tr.dsmem_exchanges == 2 * (4 - 1)  # attend merge + atomic adds
    assert tr.bytes_onchip > 0


# ---------------------------------------------------------------------------
# Plans and byte accounting.

def test_plan_validation_errors():
    with pytest.raises(ValueError, match="unassigned"):
        FusionPlan((Kernel(PIPELINE[:6]),)).validate()
    with pytest.raises(ValueError, match="duplicated"):
        FusionPlan((Kernel(PIPELINE), Kernel((Op.MLP_DOWN,)))).validate()
    with pytest.raises(ValueError, match="order"):
        FusionPlan((Kernel(PIPELINE[3:]), Kernel(PIPELINE[:3]))).validate()
    with pytest.raises(ValueError, match="unknown kernel class"):
        FusionPlan((Kernel(PIPELINE, impl="warp-magic"),)).validate()
    with pytest.raises(ValueError):
        plan_from_splits([3, 3])  # covers only six operators


def _all_contiguous_plans():
    """All 64 compositions of the 7-op pipeline into contiguous kernels."""
    plans = []
    for mask in range(2 ** 6):
        splits, run = [], 1
        for bit in range(6):
            if mask & (1 << bit):
                splits.append(run)
                run = 1
            else:
                run += 1
        splits.append(run)
        plans.append(plan_from_splits(splits))
    return plans


def test_fusion_monotonicity_over_all_plans():
    """Fusing more never costs more bytes; the two extremes bound everyone."""
    cfg = preset("tiny")
    lo = sum(kernel_layer_bytes(plan_full_fused(), cfg, 10))
    hi = sum(kernel_layer_bytes(plan_baseline(), cfg, 10))
    for plan in _all_contiguous_plans():
        total = sum(kernel_layer_bytes(plan, cfg, 10))
        assert lo <= total <= hi, plan


def test_merging_adjacent_kernels_never_increases_bytes():
    cfg = preset("tiny")
    for plan in _all_contiguous_plans():
        sizes = [len(k.ops) for k in plan.kernels]
        total = sum(kernel_layer_bytes(plan, cfg, 10))
        for i in range(len(sizes) - 1):
            merged = sizes[:i] + [sizes[i] + sizes[i + 1]] + sizes[i + 2:]
            m_total = sum(kernel_layer_bytes(plan_from_splits(merged), cfg, 10))
            assert m_total <= total


def test_mlp_down_only_uses_standalone_class():
    plan = plan_mlp_down_only()
    assert plan.kernels[-1].kernel_class == "mlp-down-standalone"
    assert plan.kernels[0].kernel_class == "library-gemm"
    baseline = plan_baseline()
    attend_kernel = baseline.kernels[2]
    assert attend_kernel.ops == (Op.ATTEND,)
    assert attend_kernel.kernel_class == "library-attend"


def test_kv_bytes_scale_with_history():
    cfg = preset("tiny")
    b0 = sum(kernel_layer_bytes(plan_full_fused(), cfg, 0))
    b100 = sum(kernel_layer_bytes(plan_full_fused(), cfg, 100))
    assert b100 - b0 == 2 * 100 * cfg.hidden * 2
