"""Analytic cost model: traffic, step time, FLOPs, calibration, ablation.

The model is deliberately simple and fully inspectable:

* off-chip bytes per kernel come from ``plans.kernel_layer_bytes`` (weights
  once per kernel, KV history reads, boundary activations);
* a kernel's time is ``bytes / (bandwidth * efficiency[kernel_class])``;
* per decode step, every layer launches every plan kernel once, plus one
  library GEMM for the unembedding head;
* step overhead = kernel_count * n_layers * launch_overhead
  + (graph_replay_overhead if graph_mode else n_layers * descriptor_cost).

Decode benchmarks report time-per-output-token averaged over a run of
``decode_tokens`` steps, during which the KV history grows linearly; since
step time is affine in the history length, the average equals the step
time at the mean history length prompt_len + (decode_tokens + 1) / 2.

``calibrate`` fits the efficiency scalars and the overhead parameters to
measured (seq_len, tpot_ms, variant) rows by relative least squares.  The
fitted values are effective-bandwidth fractions and per-step costs - model
parameters, not hardware datasheet numbers.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .config import ModelConfig, preset
from .plans import (
    FUSED_CLUSTER,
    FusionPlan,
    KERNEL_CLASSES,
    LIBRARY_ATTEND,
    LIBRARY_GEMM,
    MLP_DOWN_STANDALONE,
    kernel_layer_bytes,
    plan_attention_only,
    plan_baseline,
    plan_full_fused,
    plan_mlp_down_only,
)

DEFAULT_BANDWIDTH = 1.8e12  # bytes/s, typical flagship-GPU HBM/GDDR figure
DEFAULT_ELEM_SIZE = 2  # fp16 weights and activations
DEFAULT_PROMPT_LEN = 5  # matches the bundled reference benchmark (see flops)


def _default_efficiency() -> dict[str, float]:
    return {c: 1.0 for c in KERNEL_CLASSES}


@dataclass(frozen=True)
class HardwareModel:
    bandwidth: float = DEFAULT_BANDWIDTH
    launch_overhead: float = 0.0       # seconds per kernel launch
    descriptor_cost: float = 0.0       # seconds per layer per step (non-graph)
    graph_replay_overhead: float = 0.0  # seconds per step (graph mode)
    efficiency: dict = field(default_factory=_default_efficiency)

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        for name in ("launch_overhead", "descriptor_cost", "graph_replay_overhead"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for cls, eff in self.efficiency.items():
            if cls not in KERNEL_CLASSES:
                raise ValueError(f"unknown kernel class {cls!r}")
            if not 0.0 < eff <= 1.0:
                raise ValueError(f"efficiency[{cls}] must be in (0, 1]")

    def eff(self, kernel_class: str) -> float:
        return self.efficiency.get(kernel_class, 1.0)


# ---------------------------------------------------------------------------
# Traffic.

@dataclass
class TrafficReport:
    plan_name: str
    seq_len: int
    elem_size: int
    per_kernel_layer_bytes: list  # (kernel name, bytes) for one layer
    layer_bytes: int
    lm_head_bytes: int
    step_bytes: int  # n_layers * layer_bytes + lm_head_bytes


def lm_head_bytes(cfg: ModelConfig, elem_size: int = DEFAULT_ELEM_SIZE) -> int:
    """Final layernorm params plus the unembedding matrix, streamed per step."""
    return (2 * cfg.hidden + cfg.vocab * cfg.hidden) * elem_size


def traffic(
    plan: FusionPlan,
    cfg: ModelConfig,
    seq_len: int,
    elem_size: int = DEFAULT_ELEM_SIZE,
) -> TrafficReport:
    """Off-chip bytes for one decode step at KV history length ``seq_len``."""
    per_kernel = kernel_layer_bytes(plan, cfg, seq_len, elem_size)
    layer = sum(per_kernel)
    head = lm_head_bytes(cfg, elem_size)
    return TrafficReport(
        plan_name=plan.name or "custom",
        seq_len=seq_len,
        elem_size=elem_size,
        per_kernel_layer_bytes=[
            (k.name, b) for k, b in zip(plan.kernels, per_kernel)
        ],
        layer_bytes=layer,
        lm_head_bytes=head,
        step_bytes=cfg.n_layers * layer + head,
    )


def mlp_fusion_saving_bytes(cfg: ModelConfig, elem_size: int = DEFAULT_ELEM_SIZE) -> int:
    """Step bytes saved by fusing MLP-down into the preceding kernel.

    Difference between the attention-only plan (MLP-down split out) and the
    fully fused plan: the d_mlp-sized boundary tensor's write+read, per
    layer.  For pythia-2.8b at 2-byte elements this is exactly
    2 * 10240 * 2 * 32 = 1,310,720 bytes.
    """
    split = traffic(plan_attention_only(), cfg, seq_len=0, elem_size=elem_size)
    fused = traffic(plan_full_fused(), cfg, seq_len=0, elem_size=elem_size)
    return split.step_bytes - fused.step_bytes


def mlp_fusion_saving_seconds(
    cfg: ModelConfig,
    bandwidth: float = DEFAULT_BANDWIDTH,
    elem_size: int = DEFAULT_ELEM_SIZE,
) -> float:
    """Time equivalent of the MLP fusion saving at full streaming bandwidth.

    For pythia-2.8b at 1.8e12 B/s: 1,310,720 / 1.8e12 = 7.28e-7 s.  That is
    0.73 microseconds; quotes of "0.73 ms" for this quantity carry a
    milli/micro unit slip.
    """
    return mlp_fusion_saving_bytes(cfg, elem_size) / bandwidth


# ---------------------------------------------------------------------------
# Step time.

@dataclass
class KernelCost:
    name: str
    kernel_class: str
    bytes_per_layer: int
    seconds_per_layer: float


@dataclass
class CostReport:
    plan_name: str
    graph_mode: bool
    seq_len: float
    kernels: list  # KernelCost, per layer
    lm_head_seconds: float
    compute_seconds: float  # all kernels, all layers, plus the head
    overhead_seconds: float
    tpot_seconds: float
    throughput_tokens_per_s: float


def step_time(
    plan: FusionPlan,
    cfg: ModelConfig,
    hw: HardwareModel,
    seq_len: float,
    elem_size: int = DEFAULT_ELEM_SIZE,
) -> CostReport:
    """Model one decode step at (possibly fractional, averaged) KV length."""
    plan.validate()
    # kernel_layer_bytes is affine in seq_len; evaluate the affine map at a
    # possibly fractional length by interpolating the integer endpoints.
    lo = math.floor(seq_len)
    per_lo = kernel_layer_bytes(plan, cfg, lo, elem_size)
    if seq_len == lo:
        per_kernel_bytes = [float(b) for b in per_lo]
    else:
        per_hi = kernel_layer_bytes(plan, cfg, lo + 1, elem_size)
        t = seq_len - lo
        per_kernel_bytes = [
            (1 - t) * a + t * b for a, b in zip(per_lo, per_hi)
        ]

    kernels = []
    for kernel, nbytes in zip(plan.kernels, per_kernel_bytes):
        cls = kernel.kernel_class
        seconds = nbytes / (hw.bandwidth * hw.eff(cls))
        kernels.append(KernelCost(kernel.name, cls, int(round(nbytes)), seconds))

    head_seconds = lm_head_bytes(cfg, elem_size) / (
        hw.bandwidth * hw.eff(LIBRARY_GEMM)
    )
    compute = cfg.n_layers * sum(k.seconds_per_layer for k in kernels) + head_seconds

    overhead = plan.kernel_count * cfg.n_layers * hw.launch_overhead
    if plan.graph_mode:
        overhead += hw.graph_replay_overhead
    else:
        overhead += cfg.n_layers * hw.descriptor_cost

    tpot = compute + overhead
    return CostReport(
        plan_name=plan.name or "custom",
        graph_mode=plan.graph_mode,
        seq_len=seq_len,
        kernels=kernels,
        lm_head_seconds=head_seconds,
        compute_seconds=compute,
        overhead_seconds=overhead,
        tpot_seconds=tpot,
        throughput_tokens_per_s=1.0 / tpot,
    )


def mean_decode_seq_len(decode_tokens: int, prompt_len: int = DEFAULT_PROMPT_LEN) -> float:
    """Mean KV history length over a decode run (history grows by 1 per step)."""
    if decode_tokens < 1:
        raise ValueError("decode_tokens must be >= 1")
    return prompt_len + (decode_tokens + 1) / 2.0


def tpot_for_decode(
    plan: FusionPlan,
    cfg: ModelConfig,
    hw: HardwareModel,
    decode_tokens: int,
    prompt_len: int = DEFAULT_PROMPT_LEN,
    elem_size: int = DEFAULT_ELEM_SIZE,
) -> CostReport:
    """Average time per output token over a ``decode_tokens``-step run."""
    return step_time(
        plan, cfg, hw, mean_decode_seq_len(decode_tokens, prompt_len), elem_size
    )


# ---------------------------------------------------------------------------
# FLOPs.

@dataclass
class ParamCounts:
    per_layer: int
    blocks: int
    final_ln: int
    unembedding: int
    non_embedding: int  # blocks + final_ln


def count_params(cfg: ModelConfig) -> ParamCounts:
    h, m = cfg.hidden, cfg.d_mlp
    per_layer = (
        2 * h + 2 * h            # two layernorms (gain + bias each)
        + 3 * h * h + 3 * h      # qkv
        + h * h + h              # output projection
        + m * h + m              # mlp up
        + h * m + h              # mlp down
    )
    blocks = per_layer * cfg.n_layers
    final_ln = 2 * h
    unembedding = cfg.vocab * h
    return ParamCounts(
        per_layer=per_layer,
        blocks=blocks,
        final_ln=final_ln,
        unembedding=unembedding,
        non_embedding=blocks + final_ln,
    )


def flops_per_token(cfg: ModelConfig, position: int) -> float:
    """FLOPs to decode the token at 0-based ``position`` (cache ends at it).

    Convention: one multiply-accumulate = 2 FLOPs, embedding lookup = 0,
    weight FLOPs = 2 * params; attention scores and weighted values add
    4 * hidden * (position + 1) per layer.
    """
    counts = count_params(cfg)
    weight_flops = 2.0 * (counts.non_embedding + counts.unembedding)
    attn_flops = 4.0 * cfg.hidden * cfg.n_layers * (position + 1)
    return weight_flops + attn_flops


@dataclass
class FlopsReport:
    prompt_len: int
    decode_tokens: int
    prefill_flops: float
    decode_flops: float
    total_flops: float


def flops(cfg: ModelConfig, prompt_len: int, decode_tokens: int) -> FlopsReport:
    if prompt_len < 0 or decode_tokens < 0:
        raise ValueError("prompt_len and decode_tokens must be >= 0")
    prefill = math.fsum(flops_per_token(cfg, p) for p in range(prompt_len))
    decode = math.fsum(
        flops_per_token(cfg, prompt_len + t) for t in range(decode_tokens)
    )
    return FlopsReport(
        prompt_len=prompt_len,
        decode_tokens=decode_tokens,
        prefill_flops=prefill,
        decode_flops=decode,
        total_flops=prefill + decode,
    )


def calibrate_prompt_len(
    cfg: ModelConfig, target_prefill_flops: float, max_len: int = 4096
) -> int:
    """Prompt length whose prefill FLOPs best match a reported figure."""
    best_len, best_err = 0, math.inf
    for p in range(1, max_len + 1):
        err = abs(flops(cfg, p, 0).prefill_flops - target_prefill_flops)
        if err < best_err:
            best_len, best_err = p, err
        elif err > best_err and best_err < target_prefill_flops:
            break  # prefill FLOPs grow monotonically; past the minimum
    return best_len


# ---------------------------------------------------------------------------
# Measurements and calibration.

MEASUREMENT_HEADER = ("seq_len", "tpot_ms", "variant")

# variant name -> fusion-plan factory (seq_len column = decode-token count).
VARIANT_PLANS = {
    "baseline": lambda: plan_baseline(),
    "fused": lambda: plan_full_fused(graph_mode=False),
    "fused_graph": lambda: plan_full_fused(graph_mode=True),
    "attention_only": lambda: plan_attention_only(),
    "mlp_down_only": lambda: plan_mlp_down_only(),
}


@dataclass(frozen=True)
class Measurement:
    seq_len: int
    tpot_ms: float
    variant: str


def parse_measurements_csv(text: str) -> list[Measurement]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise ValueError("empty measurements table") from None
    if header != MEASUREMENT_HEADER:
        raise ValueError(
            f"bad measurements header {header!r}, expected {MEASUREMENT_HEADER!r}"
        )
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ValueError(f"line {lineno}: expected 3 columns, got {len(row)}")
        seq_s, tpot_s, variant = row
        try:
            seq = int(seq_s)
            tpot = float(tpot_s)
        except ValueError:
            raise ValueError(f"line {lineno}: malformed numeric cell") from None
        if variant not in VARIANT_PLANS:
            known = ", ".join(sorted(VARIANT_PLANS))
            raise ValueError(
                f"line {lineno}: unknown variant {variant!r} (known: {known})"
            )
        if seq < 1 or tpot <= 0:
            raise ValueError(f"line {lineno}: out-of-range values")
        rows.append(Measurement(seq, tpot, variant))
    if not rows:
        raise ValueError("measurements table has no data rows")
    return rows


def read_measurements_csv(path) -> list[Measurement]:
    return parse_measurements_csv(Path(path).read_text())


def bundled_measurements() -> list[Measurement]:
    """Reference decode benchmark: pythia-2.8b on an RTX-5090-class GPU."""
    path = Path(__file__).parent / "data" / "tpot_pythia28b_rtx5090.csv"
    return read_measurements_csv(path)


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationRow:
    variant: str
    seq_len: int
    measured_ms: float
    predicted_ms: float

    @property
    def rel_error(self) -> float:
        return (self.predicted_ms - self.measured_ms) / self.measured_ms


@dataclass
class CalibrationResult:
    hardware: HardwareModel
    rows: list  # CalibrationRow
    free_params: list

    @property
    def max_rel_error(self) -> float:
        return max(abs(r.rel_error) for r in self.rows)

    def max_rel_error_for(self, variant: str) -> float:
        errs = [abs(r.rel_error) for r in self.rows if r.variant == variant]
        if not errs:
            raise KeyError(f"no rows for variant {variant!r}")
        return max(errs)


def _free_params(measurements) -> list[str]:
    classes = set()
    any_graph = False
    any_nongraph = False
    for m in measurements:
        plan = VARIANT_PLANS[m.variant]()
        classes.update(k.kernel_class for k in plan.kernels)
        classes.add(LIBRARY_GEMM)  # the unembedding head
        if plan.graph_mode:
            any_graph = True
        else:
            any_nongraph = True
    params = [f"efficiency[{c}]" for c in KERNEL_CLASSES if c in classes]
    params.append("launch_overhead")
    if any_nongraph:
        params.append("descriptor_cost")
    if any_graph:
        params.append("graph_replay_overhead")
    return params


def calibrate(
    measurements,
    cfg: ModelConfig,
    bandwidth: float = DEFAULT_BANDWIDTH,
    prompt_len: int = DEFAULT_PROMPT_LEN,
    elem_size: int = DEFAULT_ELEM_SIZE,
) -> CalibrationResult:
    """Fit efficiency scalars and overheads to measured TPOT rows.

    Deterministic bounded least squares on relative errors.  Raises
    CalibrationError when there are fewer rows than free parameters.
    """
    measurements = list(measurements)
    if not measurements:
        raise CalibrationError("no measurement rows")
    free = _free_params(measurements)
    if len(measurements) < len(free):
        raise CalibrationError(
            f"underdetermined fit: {len(free)} free parameters "
            f"({', '.join(free)}) but only {len(measurements)} measurement row(s)"
        )

    eff_names = [p[len("efficiency["):-1] for p in free if p.startswith("efficiency[")]
    fit_launch = "launch_overhead" in free
    fit_desc = "descriptor_cost" in free
    fit_replay = "graph_replay_overhead" in free

    plans = {v: VARIANT_PLANS[v]() for v in {m.variant for m in measurements}}

    def unpack(x):
        eff = _default_efficiency()
        i = 0
        for name in eff_names:
            eff[name] = float(x[i])
            i += 1
        launch = float(x[i]) if fit_launch else 0.0
        i += fit_launch
        desc = float(x[i]) if fit_desc else 0.0
        i += fit_desc
        replay = float(x[i]) if fit_replay else 0.0
        return HardwareModel(
            bandwidth=bandwidth,
            launch_overhead=launch,
            descriptor_cost=desc,
            graph_replay_overhead=replay,
            efficiency=eff,
        )

    def residuals(x):
        hw = unpack(x)
        out = []
        for m in measurements:
            pred = tpot_for_decode(
                plans[m.variant], cfg, hw, m.seq_len, prompt_len, elem_size
            ).tpot_seconds
            out.append((pred * 1e3 - m.tpot_ms) / m.tpot_ms)
        return out

    x0 = [0.5] * len(eff_names)
    lo = [1e-4] * len(eff_names)
    hi = [1.0] * len(eff_names)
    for flag, start in ((fit_launch, 1e-6), (fit_desc, 1e-5), (fit_replay, 1e-4)):
        if flag:
            x0.append(start)
            lo.append(0.0)
            hi.append(0.1)

    fit = least_squares(residuals, x0, bounds=(lo, hi), method="trf", xtol=1e-14)
    hw = unpack(fit.x)
    rows = [
        CalibrationRow(
            variant=m.variant,
            seq_len=m.seq_len,
            measured_ms=m.tpot_ms,
            predicted_ms=tpot_for_decode(
                plans[m.variant], cfg, hw, m.seq_len, prompt_len, elem_size
            ).tpot_seconds * 1e3,
        )
        for m in measurements
    ]
    return CalibrationResult(hardware=hw, rows=rows, free_params=free)


_SHIPPED: dict = {}


def shipped_calibration() -> CalibrationResult:
    """Calibration of the pythia-2.8b model against the bundled benchmark."""
    if "result" not in _SHIPPED:
        _SHIPPED["result"] = calibrate(bundled_measurements(), preset("pythia-2.8b"))
    return _SHIPPED["result"]


# ---------------------------------------------------------------------------
# Ablation.

ABLATION_ORDER = ("baseline", "attention-only", "mlp-down-only", "full-fused")

_ABLATION_PLANS = {
    "baseline": lambda: plan_baseline(),
    "attention-only": lambda: plan_attention_only(),
    "mlp-down-only": lambda: plan_mlp_down_only(),
    "full-fused": lambda: plan_full_fused(graph_mode=True),
}


@dataclass
class AblationRow:
    configuration: str
    tpot_ms: float
    speedup_vs_baseline: float


@dataclass
class AblationReport:
    decode_tokens: int
    rows: list  # AblationRow, in ABLATION_ORDER

    def row(self, configuration: str) -> AblationRow:
        for r in self.rows:
            if r.configuration == configuration:
                return r
        raise KeyError(configuration)


def ablate(
    cfg: ModelConfig,
    hw: HardwareModel,
    decode_tokens: int = 2048,
    prompt_len: int = DEFAULT_PROMPT_LEN,
    elem_size: int = DEFAULT_ELEM_SIZE,
) -> AblationReport:
    """Predicted TPOT for the four fusion configurations.

    When the standalone MLP-down kernel is modelled as less efficient than
    the library GEMMs, the predicted ordering must reproduce
    full-fused < attention-only < baseline < mlp-down-only; a violation
    raises RuntimeError.
    """
    tpots = {
        name: tpot_for_decode(
            factory(), cfg, hw, decode_tokens, prompt_len, elem_size
        ).tpot_seconds * 1e3
        for name, factory in _ABLATION_PLANS.items()
    }
    base = tpots["baseline"]
    rows = [
        AblationRow(name, tpots[name], base / tpots[name])
        for name in ABLATION_ORDER
    ]
    if hw.eff(MLP_DOWN_STANDALONE) < hw.eff(LIBRARY_GEMM):
        expected = ["full-fused", "attention-only", "baseline", "mlp-down-only"]
        got = sorted(tpots, key=lambda n: tpots[n])
        if got != expected:
            raise RuntimeError(
                f"ablation ordering violated: expected {expected}, got {got}"
            )
    return AblationReport(decode_tokens=decode_tokens, rows=rows)
