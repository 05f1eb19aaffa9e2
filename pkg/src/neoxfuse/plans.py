"""Decoder-block operators, fusion plans, and the byte-accounting model.

A fusion plan is an ordered partition of the seven block operators into
kernels.  Validation requires every operator to appear exactly once and the
concatenated kernel contents to follow pipeline order (kernels are
contiguous runs of the pipeline).

Off-chip byte accounting (per layer, per kernel):

* weights are counted once per kernel that touches them (streamed again on
  every launch);
* the KV cache always lives off-chip: the QKV kernel writes this step's
  K and V (2 * hidden elements), the attention kernel reads the whole
  history (2 * seq_len * hidden elements);
* the residual stream (block input ``x``, the attention-side residual
  ``attn_res``, and the block output) occupies static per-layer buffers
  that are read/written once per layer in *every* plan, so fusing changes
  nothing about it;
* pure intermediates (post-LN vectors, rotated queries, attention context,
  the MLP hidden vector) cost one write plus one read per consuming kernel
  when they cross a kernel boundary, and nothing when producer and
  consumer share a kernel.

That last rule is where fusion pays: merging the MLP-up and MLP-down
kernels of a pythia-2.8b block deletes a d_mlp-sized boundary tensor, i.e.
2 * 10240 * elem_size bytes per layer.
"""

from dataclasses import dataclass, field
from enum import Enum

from .config import ModelConfig


class Op(Enum):
    PRE_LN = "pre_ln"
    QKV_ROPE = "qkv_rope"
    ATTEND = "attend"
    OUT_PROJ = "out_proj"
    POST_LN = "post_ln"
    MLP_UP_GELU = "mlp_up_gelu"
    MLP_DOWN = "mlp_down"


PIPELINE: tuple[Op, ...] = (
    Op.PRE_LN, Op.QKV_ROPE, Op.ATTEND, Op.OUT_PROJ,
    Op.POST_LN, Op.MLP_UP_GELU, Op.MLP_DOWN,
)

# Kernel efficiency classes used by the hardware model.
LIBRARY_GEMM = "library-gemm"
LIBRARY_ATTEND = "library-attend"
FUSED_CLUSTER = "fused-cluster"
MLP_DOWN_STANDALONE = "mlp-down-standalone"
KERNEL_CLASSES = (LIBRARY_GEMM, LIBRARY_ATTEND, FUSED_CLUSTER, MLP_DOWN_STANDALONE)


def default_kernel_class(ops: tuple[Op, ...]) -> str:
    if len(ops) > 1:
        return FUSED_CLUSTER
    return LIBRARY_ATTEND if ops[0] is Op.ATTEND else LIBRARY_GEMM


@dataclass(frozen=True)
class Kernel:
    ops: tuple[Op, ...]
    impl: str = ""  # efficiency class; "" means default_kernel_class(ops)

    @property
    def kernel_class(self) -> str:
        return self.impl or default_kernel_class(self.ops)

    @property
    def name(self) -> str:
        return "+".join(op.value for op in self.ops)


@dataclass(frozen=True)
class FusionPlan:
    kernels: tuple[Kernel, ...]
    graph_mode: bool = False
    name: str = ""

    def validate(self) -> None:
        seen = [op for k in self.kernels for op in k.ops]
        for op in PIPELINE:
            n = seen.count(op)
            if n == 0:
                raise ValueError(f"operator unassigned: {op.value}")
            if n > 1:
                raise ValueError(f"operator duplicated: {op.value}")
        if tuple(seen) != PIPELINE:
            raise ValueError("kernel operator order must follow the pipeline order")
        for k in self.kernels:
            if k.impl and k.impl not in KERNEL_CLASSES:
                raise ValueError(f"unknown kernel class {k.impl!r}")

    @property
    def kernel_count(self) -> int:
        return len(self.kernels)

    def with_graph_mode(self, graph_mode: bool) -> "FusionPlan":
        return FusionPlan(self.kernels, graph_mode=graph_mode, name=self.name)


def plan_from_splits(splits, graph_mode: bool = False, name: str = "") -> FusionPlan:
    """Build a plan from kernel sizes, e.g. (6, 1) -> two kernels."""
    if sum(splits) != len(PIPELINE) or any(s < 1 for s in splits):
        raise ValueError("splits must be positive and cover all seven operators")
    kernels, i = [], 0
    for s in splits:
        kernels.append(Kernel(PIPELINE[i:i + s]))
        i += s
    plan = FusionPlan(tuple(kernels), graph_mode=graph_mode, name=name)
    plan.validate()
    return plan


def plan_baseline() -> FusionPlan:
    """Seven library kernels, one per operator."""
    return plan_from_splits([1] * 7, name="baseline")


def plan_full_fused(graph_mode: bool = True) -> FusionPlan:
    """The whole block as one cluster kernel."""
    return plan_from_splits([7], graph_mode=graph_mode, name="full-fused")


def plan_attention_only(graph_mode: bool = False) -> FusionPlan:
    """Cluster kernel through MLP-up; MLP-down stays a library GEMM."""
    return plan_from_splits([6, 1], graph_mode=graph_mode, name="attention-only")


def plan_mlp_down_only(graph_mode: bool = False) -> FusionPlan:
    """Library kernels everywhere except a standalone MLP-down kernel."""
    kernels = tuple(Kernel((op,)) for op in PIPELINE[:-1]) + (
        Kernel((Op.MLP_DOWN,), impl=MLP_DOWN_STANDALONE),
    )
    plan = FusionPlan(kernels, graph_mode=graph_mode, name="mlp-down-only")
    plan.validate()
    return plan


NAMED_PLANS = {
    "baseline": plan_baseline,
    "full-fused": plan_full_fused,
    "attention-only": plan_attention_only,
    "mlp-down-only": plan_mlp_down_only,
}


# ---------------------------------------------------------------------------
# Dataflow metadata.

# Pure intermediates: tensor -> (producer op, consumer op, size attribute).
_INTERMEDIATES = {
    "h_ln1": (Op.PRE_LN, Op.QKV_ROPE, "hidden"),
    "q_rope": (Op.QKV_ROPE, Op.ATTEND, "hidden"),
    "ctx": (Op.ATTEND, Op.OUT_PROJ, "hidden"),
    "h_ln2": (Op.POST_LN, Op.MLP_UP_GELU, "hidden"),
    "h_mlp": (Op.MLP_UP_GELU, Op.MLP_DOWN, "d_mlp"),
}


def op_weight_elems(op: Op, cfg: ModelConfig) -> int:
    h, m = cfg.hidden, cfg.d_mlp
    return {
        Op.PRE_LN: 2 * h,
        Op.QKV_ROPE: 3 * h * h + 3 * h,
        Op.ATTEND: 0,
        Op.OUT_PROJ: h * h + h,
        Op.POST_LN: 2 * h,
        Op.MLP_UP_GELU: m * h + m,
        Op.MLP_DOWN: h * m + h,
    }[op]


def _tensor_elems(attr: str, cfg: ModelConfig) -> int:
    return getattr(cfg, attr)


def kernel_layer_bytes(
    plan: FusionPlan, cfg: ModelConfig, seq_len: int, elem_size: int = 2
) -> list[int]:
    """Per-kernel off-chip bytes for one layer at KV history length seq_len."""
    plan.validate()
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    owner = {op: i for i, k in enumerate(plan.kernels) for op in k.ops}
    bytes_per_kernel = [0] * len(plan.kernels)

    for op, idx in owner.items():
        bytes_per_kernel[idx] += op_weight_elems(op, cfg) * elem_size

    # KV cache traffic (always off-chip).
    bytes_per_kernel[owner[Op.QKV_ROPE]] += 2 * cfg.hidden * elem_size
    bytes_per_kernel[owner[Op.ATTEND]] += 2 * seq_len * cfg.hidden * elem_size

    # Residual stream: flat per-layer cost, attributed but plan-invariant.
    bytes_per_kernel[owner[Op.PRE_LN]] += cfg.hidden * elem_size      # read x
    bytes_per_kernel[owner[Op.OUT_PROJ]] += cfg.hidden * elem_size    # write attn_res
    bytes_per_kernel[owner[Op.MLP_DOWN]] += cfg.hidden * elem_size    # read attn_res
    bytes_per_kernel[owner[Op.MLP_DOWN]] += cfg.hidden * elem_size    # write block out

    # Pure intermediates, only when they cross a kernel boundary.
    for producer, consumer, attr in _INTERMEDIATES.values():
        if owner[producer] != owner[consumer]:
            size = _tensor_elems(attr, cfg) * elem_size
            bytes_per_kernel[owner[producer]] += size  # write
            bytes_per_kernel[owner[consumer]] += size  # read
    return bytes_per_kernel


def boundary_tensors(plan: FusionPlan) -> list[str]:
    """Names of pure intermediates that cross kernel boundaries in a plan."""
    plan.validate()
    owner = {op: i for i, k in enumerate(plan.kernels) for op in k.ops}
    return [
        name
        for name, (producer, consumer, _) in _INTERMEDIATES.items()
        if owner[producer] != owner[consumer]
    ]
