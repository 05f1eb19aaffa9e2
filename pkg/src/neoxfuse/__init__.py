"""Hardware-agnostic simulator of a fused GPT-NeoX decoder block,
with an analytic memory-traffic/latency model of the fusion tradeoffs."""

from .cluster import (
    ClusterSpec,
    ExecTrace,
    KernelTraceRecord,
    attend_split,
    fused_block_step,
    output_project_atomic,
    partition_kv,
    trace_to_jsonl,
)
from .config import PRESETS, ModelConfig, preset
from .fidelity import (
    DecodeInstance,
    FidelityReport,
    SweepSummary,
    adversarial_instance,
    compare,
    distinct_greedy_outputs,
    format_report,
    greedy_tokens,
    seed_sweep,
    synthetic_instance,
    topk_indices,
)
from .golden import (
    attend_naive,
    attention_scale,
    decoder_block_golden,
    gelu_exact,
    gelu_tanh,
    layernorm_single_pass,
    layernorm_two_pass,
    mlp,
    prefill_attention_tiled,
    qkv_project,
    rope_partial,
    rope_partial_inverse,
)
from .halfnum import (
    RING,
    TREE,
    Half,
    Precision,
    ReductionKind,
    ReductionStrategy,
    half_round,
    half_round_array,
    half_round_value,
    permuted_atomic,
    permuted_sum,
    reduce,
    ring_steps,
    tree_steps,
)
from .perfmodel import (
    CalibrationError,
    CostReport,
    HardwareModel,
    Measurement,
    TrafficReport,
    ablate,
    bundled_measurements,
    calibrate,
    calibrate_prompt_len,
    count_params,
    flops,
    flops_per_token,
    mlp_fusion_saving_bytes,
    mlp_fusion_saving_seconds,
    read_measurements_csv,
    shipped_calibration,
    step_time,
    tpot_for_decode,
    traffic,
)
from .plans import (
    NAMED_PLANS,
    FusionPlan,
    Kernel,
    Op,
    kernel_layer_bytes,
    plan_attention_only,
    plan_baseline,
    plan_from_splits,
    plan_full_fused,
    plan_mlp_down_only,
)
from .verify import run_suites
from .weights import (
    BlockWeights,
    KVCache,
    load_weights,
    save_weights,
    synth_weights,
)

__version__ = "0.1.0"
