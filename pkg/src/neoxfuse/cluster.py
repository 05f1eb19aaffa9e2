"""Cluster-cooperative execution simulator for the fused decoder block.

A cluster of ``n_blocks`` thread blocks splits the KV history into balanced
contiguous ranges.  Each block computes a partial softmax state for its
range; the states are merged with the log-sum-exp rule in the order the
reduction strategy dictates, and each block projects its share of the
attention context and accumulates it into the residual.

Precision semantics (``ClusterSpec.accumulation_precision``):

* EXACT - cross-block combines are order-independent by construction
  (closed-form state merge, compensated output accumulation).  This is the
  oracle mode: any seed and any strategy give bit-identical results.
* FP16 - the *output-projection accumulation* models FP16 atomic adds: per
  output element, contributions are added in a seed-keyed permuted order
  and rounded through binary16 after every add.  This is the only
  half-precision effect simulated; state merges stay float64 (they model
  fp32 DSMEM exchanges) but follow the strategy's combine order.

Execution traces count one DSMEM exchange per merged partial state, one
sync step per reduction level (ring: n-1, tree: ceil(log2 n)), and use the
byte-accounting model from ``plans``.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .golden import (
    SoftmaxState,
    attention_scale,
    finalize_state,
    layernorm_single_pass,
    merge_states,
    mlp,
    qkv_project,
    rope_partial,
    softmax_state,
)
from .halfnum import (
    Precision,
    ReductionKind,
    ReductionStrategy,
    TREE,
    counter_rand_u64,
    half_round_value,
    permutation,
    ring_steps,
    tree_steps,
)
from .plans import FusionPlan, Op, kernel_layer_bytes
from .weights import BlockWeights, KVCache

# On-chip exchanges move fp32 payloads.
_ONCHIP_ELEM = 4
DEFAULT_N_BLOCKS = 4


@dataclass(frozen=True)
class ClusterSpec:
    """How one decoder block is executed by a cluster of thread blocks."""

    n_blocks: int = DEFAULT_N_BLOCKS
    reduction: ReductionStrategy = TREE
    accumulation_precision: Precision = Precision.EXACT
    atomic_seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")


@dataclass
class KernelTraceRecord:
    name: str
    bytes_offchip: int
    bytes_onchip: int = 0
    sync_steps: int = 0
    dsmem_exchanges: int = 0


@dataclass
class ExecTrace:
    """Aggregate counters plus one record per simulated kernel."""

    records: list[KernelTraceRecord] = field(default_factory=list)

    @property
    def kernel_count(self) -> int:
        return len(self.records)

    @property
    def bytes_offchip(self) -> int:
        return sum(r.bytes_offchip for r in self.records)

    @property
    def bytes_onchip(self) -> int:
        return sum(r.bytes_onchip for r in self.records)

    @property
    def sync_steps(self) -> int:
        return sum(r.sync_steps for r in self.records)

    @property
    def dsmem_exchanges(self) -> int:
        return sum(r.dsmem_exchanges for r in self.records)


def trace_to_jsonl(trace: ExecTrace) -> str:
    """One line per kernel record: name, bytes_offchip, bytes_onchip, sync_steps."""
    import json

    lines = [
        json.dumps(
            {
                "name": r.name,
                "bytes_offchip": r.bytes_offchip,
                "bytes_onchip": r.bytes_onchip,
                "sync_steps": r.sync_steps,
            },
            sort_keys=True,
        )
        for r in trace.records
    ]
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# KV partitioning.

def partition_kv(seq_len: int, n_blocks: int) -> list[tuple[int, int]]:
    """Balanced contiguous [start, end) ranges; sizes differ by at most one.

    Ranges may be empty when n_blocks > seq_len.  The first seq_len % n_blocks
    ranges get the extra element.
    """
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    base, extra = divmod(seq_len, n_blocks)
    ranges, start = [], 0
    for b in range(n_blocks):
        size = base + (1 if b < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ranges


def _resolve_reduction(strategy: ReductionStrategy, n_blocks: int) -> ReductionStrategy:
    """Tree reductions require a power-of-two cluster; otherwise fall back to ring."""
    if strategy.kind is ReductionKind.TREE and n_blocks & (n_blocks - 1):
        warnings.warn(
            f"tree reduction needs a power-of-two cluster, got {n_blocks}; "
            "falling back to ring",
            RuntimeWarning,
            stacklevel=3,
        )
        return ReductionStrategy(ReductionKind.RING, strategy.seed)
    return strategy


def _merge_order(strategy: ReductionStrategy, n: int) -> list[int]:
    if strategy.kind is ReductionKind.PERMUTED_ATOMIC:
        return permutation(n, strategy.seed)
    return list(range(n))


def _merge_exact(states: list[SoftmaxState]) -> SoftmaxState:
    """Order-independent merge: closed form over all partial states at once."""
    live = [s for s in states if s.l > 0.0]
    if not live:
        return SoftmaxState.empty(states[0].o.shape[0])
    m = max(s.m for s in live)
    factors = [math.exp(s.m - m) for s in live]
    l = math.fsum(s.l * f for s, f in zip(live, factors))
    o = np.sum([s.o * f for s, f in zip(live, factors)], axis=0)
    return SoftmaxState(m=m, l=l, o=o)


def _merge_ordered(states: list[SoftmaxState], strategy: ReductionStrategy) -> SoftmaxState:
    """Pairwise merges following the strategy's combine order (float64)."""
    if strategy.kind is ReductionKind.TREE:
        level = list(states)
        while len(level) > 1:
            nxt = [
                merge_states(level[i], level[i + 1])
                for i in range(0, len(level) - 1, 2)
            ]
            if len(level) % 2:
                nxt.append(level[-1])
            level = nxt
        return level[0]
    order = _merge_order(strategy, len(states))
    acc = states[order[0]]
    for i in order[1:]:
        acc = merge_states(acc, states[i])
    return acc


def _split_states(q, keys, values, spec: ClusterSpec, scale: float):
    ranges = partition_kv(keys.shape[0], spec.n_blocks)
    return [
        softmax_state(q, keys[a:b], values[a:b], scale) for a, b in ranges
    ]


def attend_split(q, keys, values, spec: ClusterSpec, scale: float):
    """Split-KV attention for one head.  Returns (output, ExecTrace).

    With a single block this is bitwise identical to ``attend_naive``.  In
    EXACT precision the merge is order-independent; otherwise the merge
    follows the reduction strategy's order (see module docstring).
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape[0] == 0:
        raise ValueError("attention over empty cache")
    strategy = _resolve_reduction(spec.reduction, spec.n_blocks)
    states = _split_states(q, keys, values, spec, scale)
    if spec.n_blocks == 1:
        merged = states[0]
    elif spec.accumulation_precision is Precision.EXACT:
        merged = _merge_exact(states)
    else:
        merged = _merge_ordered(states, strategy)
    out = finalize_state(merged)

    n = spec.n_blocks
    d = values.shape[-1]
    levels = tree_steps(n) if strategy.kind is ReductionKind.TREE else ring_steps(n)
    record = KernelTraceRecord(
        name="attend",
        bytes_offchip=2 * keys.shape[0] * d * 2,  # fp16 KV history read
        bytes_onchip=(n - 1) * (d + 2) * _ONCHIP_ELEM,
        sync_steps=levels,
        dsmem_exchanges=n - 1,
    )
    return out, ExecTrace(records=[record])


# ---------------------------------------------------------------------------
# Output projection with atomic accumulation.

def _element_seed(seed: int, j: int) -> int:
    # Independent permutation stream per output element.
    return counter_rand_u64(seed, j)


def output_project_atomic(
    context_partials, w_out, b_out, residual, spec: ClusterSpec
) -> np.ndarray:
    """Accumulate per-block context shares into the residual.

    ``context_partials`` is [n_blocks, hidden]; the shares must sum to the
    attention context, so the per-block projections sum (in exact
    arithmetic) to the context's projection contribution.  Each block
    projects its share and accumulates it into ``residual + b_out``.  FP16
    precision applies ``permuted_sum`` semantics per output element, keyed
    by ``atomic_seed``; EXACT precision is compensated and seed-independent.
    """
    partials = np.asarray(context_partials, dtype=np.float64)
    if partials.ndim != 2 or partials.shape[0] != spec.n_blocks:
        raise ValueError("context_partials must be [n_blocks, hidden]")
    residual = np.asarray(residual, dtype=np.float64)
    projected = partials @ np.asarray(w_out, dtype=np.float64).T  # [n_blocks, hidden]
    init = residual + b_out

    if spec.accumulation_precision is Precision.EXACT or spec.n_blocks == 1:
        total = np.array(
            [math.fsum(projected[:, j]) for j in range(projected.shape[1])]
        )
        return init + total

    out = np.empty_like(init)
    for j in range(out.shape[0]):
        order = permutation(spec.n_blocks, _element_seed(spec.atomic_seed, j))
        acc = half_round_value(init[j])
        for b in order:
            acc = half_round_value(acc + projected[b, j])
        out[j] = acc
    return out


# ---------------------------------------------------------------------------
# Fully simulated block step.

def fused_block_step(
    x,
    w: BlockWeights,
    cache: KVCache,
    pos: int,
    cfg: ModelConfig,
    spec: ClusterSpec,
    plan: FusionPlan,
    gelu: str = "tanh",
    elem_size: int = 2,
):
    """One decode step executed under a fusion plan with cluster semantics.

    Returns (output, ExecTrace).  The numeric path is plan-independent
    (the plan decides kernel boundaries, hence the trace); under EXACT
    precision the output matches ``decoder_block_golden`` to ~1e-8.
    """
    plan.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.hidden,):
        raise ValueError(f"input must have shape ({cfg.hidden},)")
    if len(cache) != pos:
        raise ValueError(f"cache holds {len(cache)} positions, expected {pos}")
    strategy = _resolve_reduction(spec.reduction, spec.n_blocks)

    normed1 = layernorm_single_pass(x, w.ln1_gain, w.ln1_bias, cfg.ln_eps)
    q, k, v = qkv_project(normed1, w, cfg)
    rd, tb = cfg.rotary_dims, cfg.theta_base
    q = rope_partial(q, pos, rd, tb)
    k = rope_partial(k, pos, rd, tb)
    cache.append(k, v)

    seq_len = len(cache)
    scale = attention_scale(cfg)
    n = spec.n_blocks

    # Per-block softmax states per head, then the strategy-governed merge.
    shares = np.zeros((n, cfg.hidden))
    for h in range(cfg.n_heads):
        keys, values = cache.head(h)
        states = _split_states(q[h], keys, values, spec, scale)
        if n == 1:
            merged = states[0]
        elif spec.accumulation_precision is Precision.EXACT:
            merged = _merge_exact(states)
        else:
            merged = _merge_ordered(states, strategy)
        if merged.l == 0.0:
            raise ValueError("attention over empty cache")
        # Block b's share of the final context for this head.
        lo = h * cfg.d_head
        for b, s in enumerate(states):
            if s.l > 0.0:
                shares[b, lo:lo + cfg.d_head] = (
                    s.o * math.exp(s.m - merged.m) / merged.l
                )

    attn_res = output_project_atomic(shares, w.out_weight, w.out_bias, x, spec)

    ln2_in = x if cfg.parallel_residual else attn_res
    normed2 = layernorm_single_pass(ln2_in, w.ln2_gain, w.ln2_bias, cfg.ln_eps)
    out = attn_res + mlp(normed2, w, gelu)

    # Trace: plan bytes plus cluster reduction counters on the owning kernels.
    levels = tree_steps(n) if strategy.kind is ReductionKind.TREE else ring_steps(n)
    per_kernel = kernel_layer_bytes(plan, cfg, seq_len, elem_size)
    records = []
    for kernel, nbytes in zip(plan.kernels, per_kernel):
        rec = KernelTraceRecord(name=kernel.name, bytes_offchip=nbytes)
        if Op.ATTEND in kernel.ops:
            rec.bytes_onchip += (n - 1) * cfg.n_heads * (cfg.d_head + 2) * _ONCHIP_ELEM
            rec.sync_steps += levels
            rec.dsmem_exchanges += n - 1
        if Op.OUT_PROJ in kernel.ops:
            rec.bytes_onchip += (n - 1) * cfg.hidden * _ONCHIP_ELEM
            rec.sync_steps += levels
            rec.dsmem_exchanges += n - 1
        records.append(rec)
    return out, ExecTrace(records=records)
