"""One decode step, seven operators, any fusion plan.

A decoder block is a fixed pipeline: pre-LayerNorm, QKV projection with
rotary embedding, attention over the KV cache, output projection, a second
LayerNorm, MLP up + activation, MLP down.  A fusion plan groups those
operators into kernels.  The values computed never depend on the grouping —
only the memory traffic does, because every kernel boundary forces the
activation tensor out to off-chip memory and back.  This demo steps the
same input through several plans, checks the outputs against the exact
reference block, and tallies the per-kernel traffic.
"""

import numpy as np

from neoxfuse import (
    ClusterSpec,
    KVCache,
    Precision,
    decoder_block_golden,
    fused_block_step,
    kernel_layer_bytes,
    plan_baseline,
    plan_full_fused,
    plan_mlp_down_only,
    preset,
    synth_weights,
    trace_to_jsonl,
)

cfg = preset("tiny")
w = synth_weights(cfg, seed=1)
rng = np.random.default_rng(1)

# Warm the cache with a few golden steps, then take one more step under
# each plan and compare against the reference.
cache = KVCache(cfg.n_heads, cfg.d_head)
for pos in range(6):
    decoder_block_golden(rng.standard_normal(cfg.hidden) * 0.5, w, cache, pos, cfg)
x = rng.standard_normal(cfg.hidden) * 0.5
ref_cache = KVCache.from_arrays(cache.keys(), cache.values())
want = decoder_block_golden(x, w, ref_cache, 6, cfg)

plans = [plan_baseline(), plan_mlp_down_only(), plan_full_fused()]
print(f"model: hidden={cfg.hidden}, heads={cfg.n_heads}, history=6\n")
for plan in plans:
    c = KVCache.from_arrays(cache.keys(), cache.values())
    got, trace = fused_block_step(
        x, w, c, 6, cfg, ClusterSpec(4, accumulation_precision=Precision.EXACT),
        plan)
    err = float(np.max(np.abs(got - want)))
    impls = sorted({k.kernel_class for k in plan.kernels})
    print(f"{plan.name:15s}: {trace.kernel_count} kernels "
          f"({', '.join(impls)}), max |err| vs reference {err:.2e}")
print()

# Traffic per plan at a 10-token history: every extra kernel boundary costs
# a round trip of the activations.
print("per-layer off-chip traffic at history 10:")
for plan in plans:
    per_kernel = kernel_layer_bytes(plan, cfg, 10)
    print(f"  {plan.name:15s} {sum(per_kernel):6d} bytes  "
          f"({' + '.join(str(b) for b in per_kernel)})")
print()

# The trace is serializable for downstream tooling.
c = KVCache.from_arrays(cache.keys(), cache.values())
_, trace = fused_block_step(x, w, c, 6, cfg, ClusterSpec(4), plan_baseline())
print("baseline trace records (JSONL):")
print(trace_to_jsonl(trace))
