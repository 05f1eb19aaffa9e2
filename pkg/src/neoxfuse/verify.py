"""Self-check suites: oracle equivalences runnable from the command line.

Each suite re-derives a handful of golden-path identities with fresh random
data so a user can confirm an installation behaves before trusting model
numbers.  ``inject_fault=True`` is a documented test hook: it perturbs one
comparison operand in the split suite by 1e-3, which the suite must catch
(used to prove the harness can fail).
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterSpec, attend_split, partition_kv
from .golden import (
    attend_naive,
    layernorm_single_pass,
    layernorm_two_pass,
    prefill_attention_tiled,
    rope_partial,
    rope_partial_inverse,
)
from .halfnum import (
    RING,
    TREE,
    Precision,
    reduce,
    ring_steps,
    tree_steps,
)


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _rel_err(a, b):
    denom = np.maximum(np.abs(b), 1e-300)
    return float(np.max(np.abs(a - b) / denom))


def suite_split(rng, inject_fault=False):
    results = []
    d = 16
    scale = 1.0 / math.sqrt(d)
    worst = 0.0
    for seq in (1, 2, 7, 64, 256, 512):
        q = rng.standard_normal(d)
        keys = rng.standard_normal((seq, d))
        values = rng.standard_normal((seq, d))
        ref = attend_naive(q, keys, values, scale)
        for n_blocks in (1, 2, 3, 4, 8, 16):
            for strat in (RING, TREE):
                spec = ClusterSpec(
                    n_blocks=n_blocks, reduction=strat,
                    accumulation_precision=Precision.EXACT,
                )
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    out, _ = attend_split(q, keys, values, spec, scale)
                if inject_fault:
                    out = out + 1e-3
                    inject_fault = False  # perturb exactly one comparison
                worst = max(worst, _rel_err(out, ref))
    results.append(CheckResult(
        "split", "split attention matches naive (exact mode)",
        worst <= 1e-10, f"worst rel err {worst:.3e}"))

    q = rng.standard_normal(d)
    keys = rng.standard_normal((37, d))
    values = rng.standard_normal((37, d))
    one, _ = attend_split(q, keys, values, ClusterSpec(n_blocks=1), scale)
    results.append(CheckResult(
        "split", "single block is bitwise the naive path",
        bool(np.array_equal(one, attend_naive(q, keys, values, scale)))))

    parts = partition_kv(37, 5)
    covered = parts[0][0] == 0 and parts[-1][1] == 37 and all(
        parts[i][1] == parts[i + 1][0] for i in range(len(parts) - 1))
    sizes = {e - s for s, e in parts}
    results.append(CheckResult(
        "split", "kv partition is contiguous and balanced",
        covered and max(sizes) - min(sizes) <= 1, f"sizes {sorted(sizes)}"))
    return results


def suite_layernorm(rng, inject_fault=False):
    results = []
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 2561))
        x = rng.standard_normal(n) * float(rng.uniform(0.1, 10))
        gain = 1 + 0.1 * rng.standard_normal(n)
        bias = 0.1 * rng.standard_normal(n)
        a = layernorm_single_pass(x, gain, bias, 1e-5)
        b = layernorm_two_pass(x, gain, bias, 1e-5)
        scale_ref = np.max(np.abs(b)) + 1e-30
        worst = max(worst, float(np.max(np.abs(a - b))) / scale_ref)
    results.append(CheckResult(
        "layernorm", "single-pass matches two-pass on random vectors",
        worst <= 1e-6, f"worst scaled err {worst:.3e}"))

    x = 10000.0 + rng.standard_normal(2560)
    gain = np.ones(2560)
    bias = np.zeros(2560)
    a = layernorm_single_pass(x, gain, bias, 1e-5)
    b = layernorm_two_pass(x, gain, bias, 1e-5)
    err = float(np.max(np.abs(a - b))) / (np.max(np.abs(b)) + 1e-30)
    results.append(CheckResult(
        "layernorm", "large-mean input stays within loose tolerance",
        err <= 1e-3, f"scaled err {err:.3e}"))
    return results


def suite_rope(rng, inject_fault=False):
    results = []
    d, rot = 64, 16
    ok_norm = ok_inv = ok_pass = ok_zero = True
    for pos in (0, 1, 17, 2047):
        v = rng.standard_normal(d)
        r = rope_partial(v, pos, rot)
        half = rot // 2
        for i in range(half):
            n0 = math.hypot(v[i], v[i + half])
            n1 = math.hypot(r[i], r[i + half])
            ok_norm &= abs(n0 - n1) <= 1e-12 * max(1.0, n0)
        back = rope_partial_inverse(r, pos, rot)
        ok_inv &= bool(np.max(np.abs(back - v)) <= 1e-12)
        ok_pass &= bool(np.array_equal(r[rot:], v[rot:]))
        if pos == 0:
            ok_zero = bool(np.array_equal(r, v))
    results.append(CheckResult("rope", "rotation preserves pair norms", ok_norm))
    results.append(CheckResult("rope", "inverse rotation recovers input", ok_inv))
    results.append(CheckResult(
        "rope", "pass-through dims are bitwise untouched", ok_pass))
    results.append(CheckResult("rope", "position zero is the identity", ok_zero))
    return results


def suite_prefill(rng, inject_fault=False):
    results = []
    d = 16
    scale = 1.0 / math.sqrt(d)
    worst = 0.0
    for seq in (1, 5, 37, 128):
        Q = rng.standard_normal((seq, d))
        K = rng.standard_normal((seq, d))
        V = rng.standard_normal((seq, d))
        ref = np.stack([
            attend_naive(Q[i], K[: i + 1], V[: i + 1], scale)
            for i in range(seq)
        ])
        for tile in (1, 3, 16, seq):
            out = prefill_attention_tiled(Q, K, V, tile, scale=scale)
            worst = max(worst, _rel_err(out, ref))
    results.append(CheckResult(
        "prefill", "tiled causal prefill matches per-row attention",
        worst <= 1e-10, f"worst rel err {worst:.3e}"))
    return results


def suite_reduction(rng, inject_fault=False):
    results = []
    ok_steps = all(
        tree_steps(n) == math.ceil(math.log2(n)) and ring_steps(n) == n - 1
        for n in range(1, 1025)
    )
    results.append(CheckResult(
        "reduction", "step counts match closed forms for n in 1..1024", ok_steps))

    ok_exact = True
    for n in (1, 2, 3, 8, 33):
        vals = [rng.standard_normal(5) for _ in range(n)]
        ref = np.array([math.fsum(v[j] for v in vals) for j in range(5)])
        for strat in (RING, TREE):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out, _ = reduce(vals, strat, Precision.EXACT)
            ok_exact &= bool(np.array_equal(out, ref))
    results.append(CheckResult(
        "reduction", "exact reductions are order-independent (fsum oracle)",
        ok_exact))

    vals = [rng.standard_normal(4) for _ in range(6)]
    a, _ = reduce(vals, RING, Precision.FP16)
    b, _ = reduce(vals, RING, Precision.FP16)
    results.append(CheckResult(
        "reduction", "half-precision reduction is deterministic",
        bool(np.array_equal(a, b))))

    single, steps = reduce(vals[:1], RING, Precision.FP16)
    results.append(CheckResult(
        "reduction", "single-operand reduction returns its input in 0 steps",
        bool(np.array_equal(single, vals[0])) and steps == 0))
    return results


SUITES = {
    "split": suite_split,
    "layernorm": suite_layernorm,
    "rope": suite_rope,
    "prefill": suite_prefill,
    "reduction": suite_reduction,
}


def run_suites(names=None, seed: int = 0, inject_fault: bool = False):
    """Run the named suites (all by default) and return their CheckResults."""
    if names is None:
        names = list(SUITES)
    names = list(names)
    if not names:
        raise ValueError("no suites selected")
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        known = ", ".join(SUITES)
        raise ValueError(f"unknown suite(s) {unknown} (known: {known})")
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        results.extend(SUITES[name](rng, inject_fault=inject_fault))
    return results
