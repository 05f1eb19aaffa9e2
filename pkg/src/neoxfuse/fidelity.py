"""Output-fidelity metrics between golden and cluster-simulated decoding.

A ``DecodeInstance`` packages a small model, a pre-filled KV history, a
fixed sequence of per-step input vectors, and a probe head (an unembedding
matrix) that turns block outputs into logits so token-level metrics are
defined.  Both pipelines consume the same inputs step by step; only the
internal arithmetic differs.

Metrics follow the usual definitions: greedy-token match rate across
steps, mean absolute logits error over all entries, and top-k agreement
as unordered index-set equality per step.
"""

import json
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterSpec, fused_block_step
from .config import ModelConfig, preset
from .golden import decoder_block_golden
from .halfnum import RING, Precision
from .plans import plan_full_fused
from .weights import BlockWeights, KVCache, synth_weights


def greedy_tokens(logits_sequence) -> list:
    """Argmax per step; ties break toward the lowest index."""
    seq = np.asarray(logits_sequence, dtype=np.float64)
    if seq.ndim != 2:
        raise ValueError("logits_sequence must be [steps, vocab]")
    if seq.shape[1] == 0:
        raise ValueError("logits vectors must be non-empty")
    return [int(i) for i in np.argmax(seq, axis=1)]


def topk_indices(logits, k: int) -> frozenset:
    """Indices of the k largest entries (ties toward lower indices)."""
    logits = np.asarray(logits)
    if not 1 <= k <= logits.shape[-1]:
        raise ValueError(f"k={k} out of range for vocab {logits.shape[-1]}")
    order = np.argsort(-logits, kind="stable")
    return frozenset(int(i) for i in order[:k])


@dataclass(frozen=True)
class FidelityReport:
    token_match_rate: float
    logits_mae: float
    topk_agreement: dict  # k -> fraction
    n_trials: int

    def __post_init__(self):
        if not 0.0 <= self.token_match_rate <= 1.0:
            raise ValueError("token_match_rate must be in [0, 1]")
        if self.logits_mae < 0:
            raise ValueError("logits_mae must be >= 0")
        for k, frac in self.topk_agreement.items():
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"topk_agreement[{k}] must be in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "token_match_rate": self.token_match_rate,
            "logits_mae": self.logits_mae,
            "topk_agreement": {str(k): v for k, v in self.topk_agreement.items()},
            "n_trials": self.n_trials,
        }


def compare(golden_logits, variant_logits, ks=(5, 10)) -> FidelityReport:
    """Per-step fidelity of ``variant_logits`` against ``golden_logits``.

    Both are [steps, vocab]; a trial is one decode step.
    """
    g = np.asarray(golden_logits, dtype=np.float64)
    v = np.asarray(variant_logits, dtype=np.float64)
    if g.shape != v.shape:
        raise ValueError(f"shape mismatch: golden {g.shape} vs variant {v.shape}")
    if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] == 0:
        raise ValueError("logits must be non-empty [steps, vocab]")
    steps = g.shape[0]
    gt, vt = greedy_tokens(g), greedy_tokens(v)
    match = sum(a == b for a, b in zip(gt, vt)) / steps
    mae = float(np.mean(np.abs(g - v)))
    topk = {}
    for k in sorted(set(ks)):
        agree = sum(
            topk_indices(g[t], k) == topk_indices(v[t], k) for t in range(steps)
        )
        topk[k] = agree / steps
    return FidelityReport(match, mae, topk, steps)


# ---------------------------------------------------------------------------
# Decode instances.

@dataclass(frozen=True)
class DecodeInstance:
    """A reproducible decode scenario shared by both pipelines.

    ``unembed`` is a probe head applied directly to block outputs; it
    exists so token metrics are defined, not to model a real LM head.
    """

    cfg: ModelConfig
    weights: BlockWeights
    unembed: np.ndarray      # [vocab, hidden]
    xs: np.ndarray           # [steps, hidden] per-step inputs
    prompt_keys: np.ndarray  # [n_heads, prompt, d_head], already rotated
    prompt_values: np.ndarray

    def __post_init__(self):
        self.weights.validate(self.cfg)
        if self.unembed.shape != (self.cfg.vocab, self.cfg.hidden):
            raise ValueError("unembed must be [vocab, hidden]")
        if self.xs.ndim != 2 or self.xs.shape[1] != self.cfg.hidden:
            raise ValueError("xs must be [steps, hidden]")

    @property
    def prompt_len(self) -> int:
        return self.prompt_keys.shape[1]

    @property
    def steps(self) -> int:
        return self.xs.shape[0]

    def _fresh_cache(self) -> KVCache:
        return KVCache.from_arrays(self.prompt_keys, self.prompt_values)

    def golden_logits(self, gelu: str = "tanh") -> np.ndarray:
        cache = self._fresh_cache()
        out = np.empty((self.steps, self.cfg.vocab))
        for t in range(self.steps):
            h = decoder_block_golden(
                self.xs[t], self.weights, cache, self.prompt_len + t,
                self.cfg, gelu,
            )
            out[t] = self.unembed @ h
        return out

    def variant_logits(self, spec: ClusterSpec, gelu: str = "tanh") -> np.ndarray:
        """Cluster-simulated logits; the fusion plan does not affect values."""
        cache = self._fresh_cache()
        plan = plan_full_fused()
        out = np.empty((self.steps, self.cfg.vocab))
        for t in range(self.steps):
            h, _ = fused_block_step(
                self.xs[t], self.weights, cache, self.prompt_len + t,
                self.cfg, spec, plan, gelu,
            )
            out[t] = self.unembed @ h
        return out


def synthetic_instance(
    seed: int,
    cfg: ModelConfig | None = None,
    prompt_len: int = 12,
    steps: int = 8,
) -> DecodeInstance:
    """Random tiny-model instance with a seeded probe head."""
    cfg = cfg or preset("tiny")
    w = synth_weights(cfg, seed)
    rng = np.random.default_rng(seed)
    unembed = rng.standard_normal((cfg.vocab, cfg.hidden))
    xs = rng.standard_normal((steps, cfg.hidden)) * 0.5
    pk = rng.standard_normal((cfg.n_heads, prompt_len, cfg.d_head)) * 0.5
    pv = rng.standard_normal((cfg.n_heads, prompt_len, cfg.d_head)) * 0.5
    return DecodeInstance(cfg, w, unembed, xs, pk, pv)


def adversarial_instance() -> DecodeInstance:
    """Single-step instance whose greedy token depends on accumulation order.

    Constructed so attention weights are exactly uniform over four cached
    positions and, with a 3-block KV split, the output-projection partials
    for element 0 are {1.0, 2^-11, 2^-11}: in half precision their sum is
    1.0 when 1.0 arrives first (each tiny addend ties to even) and
    1.0009765625 when both tiny addends combine first.  The probe head
    turns that gap into an argmax flip; exact accumulation is order-free.
    """
    cfg = ModelConfig(
        hidden=8, n_heads=1, d_head=8, n_layers=1, d_mlp=16,
        rotary_pct=0.25, vocab=11,
    )
    h, m = cfg.hidden, cfg.d_mlp
    qkv_bias = np.zeros(3 * h)
    qkv_bias[2 * h] = 2.0 ** -9  # value bias, element 0
    w = BlockWeights(
        ln1_gain=np.ones(h), ln1_bias=np.zeros(h),
        qkv_weight=np.zeros((3 * h, h)), qkv_bias=qkv_bias,
        out_weight=np.eye(h), out_bias=np.zeros(h),
        ln2_gain=np.ones(h), ln2_bias=np.zeros(h),
        up_weight=np.zeros((m, h)), up_bias=np.zeros(m),
        down_weight=np.zeros((h, m)), down_bias=np.zeros(h),
    )
    prompt_keys = np.zeros((1, 3, h))
    prompt_values = np.zeros((1, 3, h))
    prompt_values[0, 0, 0] = 4.0
    prompt_values[0, 0, 1] = 4.0
    prompt_values[0, 2, 0] = 2.0 ** -9
    unembed = np.zeros((cfg.vocab, h))
    unembed[0, 0] = 1024.0
    unembed[1, 1] = 1024.5
    xs = np.zeros((1, h))
    return DecodeInstance(cfg, w, unembed, xs, prompt_keys, prompt_values)


ADVERSARIAL_N_BLOCKS = 3


# ---------------------------------------------------------------------------
# Seed sweeps.

@dataclass
class SweepSummary:
    reports: list  # FidelityReport, one per seed
    seeds: list

    def _metric(self, pick):
        vals = [pick(r) for r in self.reports]
        return {"min": min(vals), "mean": sum(vals) / len(vals), "max": max(vals)}

    def summary(self) -> dict:
        out = {
            "token_match_rate": self._metric(lambda r: r.token_match_rate),
            "logits_mae": self._metric(lambda r: r.logits_mae),
        }
        for k in self.reports[0].topk_agreement:
            out[f"top{k}_agreement"] = self._metric(lambda r: r.topk_agreement[k])
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "seeds": self.seeds,
                "summary": self.summary(),
                "reports": [r.to_dict() for r in self.reports],
            },
            indent=2,
            sort_keys=True,
        )


def seed_sweep(
    instance: DecodeInstance,
    seeds,
    n_blocks: int = ADVERSARIAL_N_BLOCKS,
    precision: Precision = Precision.FP16,
    ks=(5, 10),
    gelu: str = "tanh",
) -> SweepSummary:
    """One report per atomic seed against the golden pipeline."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("empty seed range")
    golden = instance.golden_logits(gelu)
    reports = []
    for s in seeds:
        spec = ClusterSpec(
            n_blocks=n_blocks, reduction=RING,
            accumulation_precision=precision, atomic_seed=s,
        )
        reports.append(compare(golden, instance.variant_logits(spec, gelu), ks))
    return SweepSummary(reports=reports, seeds=seeds)


def distinct_greedy_outputs(
    instance: DecodeInstance,
    seeds,
    n_blocks: int = ADVERSARIAL_N_BLOCKS,
    precision: Precision = Precision.FP16,
    gelu: str = "tanh",
) -> set:
    """Distinct greedy token sequences the variant emits across seeds."""
    out = set()
    for s in seeds:
        spec = ClusterSpec(
            n_blocks=n_blocks, reduction=RING,
            accumulation_precision=precision, atomic_seed=s,
        )
        out.add(tuple(greedy_tokens(instance.variant_logits(spec, gelu))))
    return out


def format_report(report: FidelityReport) -> str:
    """Console table with one metric per row."""
    rows = [
        ("Token Match Rate", f"{report.token_match_rate * 100:.1f}%"),
        ("Logits MAE", f"{report.logits_mae:.4f}"),
    ]
    for k, frac in sorted(report.topk_agreement.items()):
        rows.append((f"Top-{k} Agreement", f"{frac * 100:.1f}%"))
    rows.append(("Trials", str(report.n_trials)))
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)
