"""Software IEEE 754 binary16 arithmetic and order-sensitive reductions.

Everything here is bit-exact and host-independent: float64 -> binary16
conversion is done with integer manipulation of the raw float64 bit pattern
(round-to-nearest-even, overflow to +/-inf), never by delegating to a
platform half type.  The reduction orders are driven by a counter-based
PRNG (SplitMix64) so that a given seed produces the same permutation in any
implementation of the same algorithm.

Precision semantics for reductions:

* ``Precision.EXACT`` - the combined result is the correctly rounded true
  sum (compensated summation via ``math.fsum``).  By construction it does
  not depend on the combine order, so every strategy and every seed returns
  bit-identical vectors.
* ``Precision.FP16`` - operands are combined pairwise in the order the
  strategy dictates, and the result of *every* combine is rounded through
  binary16.  Operands themselves are not pre-rounded; a single-operand
  reduction is the identity.
"""

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# ---------------------------------------------------------------------------
# Counter-based PRNG (SplitMix64 output function).

def counter_rand_u64(seed: int, counter: int) -> int:
    """Return the ``counter``-th raw 64-bit draw of the stream keyed by ``seed``.

    This is the SplitMix64 output function applied to
    ``seed + (counter + 1) * 0x9E3779B97F4A7C15`` (mod 2**64).  It is a pure
    function of (seed, counter): no hidden state, trivially reproducible.
    """
    z = (seed + (counter + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def counter_rand_u64_array(seed: int, counters) -> np.ndarray:
    """Vectorised ``counter_rand_u64`` over an array of counters.

    Same function, same bits; uint64 arithmetic wraps mod 2**64 just like
    the masked Python-int version.
    """
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (np.uint64(seed & _MASK64) + (c + np.uint64(1)) * np.uint64(_GOLDEN))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates permutation of range(n) keyed by ``counter_rand_u64``.

    Swap index is ``draw % (i + 1)`` (the small modulo bias is accepted and
    part of the documented algorithm).  Pure function of (n, seed).
    """
    idx = list(range(n))
    counter = 0
    for i in range(n - 1, 0, -1):
        j = counter_rand_u64(seed, counter) % (i + 1)
        counter += 1
        idx[i], idx[j] = idx[j], idx[i]
    return idx


# ---------------------------------------------------------------------------
# binary16 conversion.

def _f64_bits_to_f16_bits(b: int) -> int:
    """Convert a raw float64 bit pattern to a binary16 bit pattern (RNE)."""
    sign = (b >> 48) & 0x8000
    exp = (b >> 52) & 0x7FF
    frac = b & 0xFFFFFFFFFFFFF

    if exp == 0x7FF:
        if frac:
            return 0x7E00  # any NaN -> canonical quiet NaN
        return sign | 0x7C00

    e = exp - 1023
    if e >= 16:
        return sign | 0x7C00  # magnitude >= 2**16 always overflows to inf

    if e >= -14:
        # Normal target.
        mant = frac >> 42
        rest = frac & ((1 << 42) - 1)
        h = ((e + 15) << 10) | mant
        tie = 1 << 41
        if rest > tie or (rest == tie and (h & 1)):
            h += 1  # carry may roll into the exponent: 65504+ -> inf
        return sign | h

    if e < -26:
        return sign  # below half the smallest subnormal: rounds to zero

    # Subnormal target: round value / 2**-24 to an integer in [0, 1024].
    sig = (1 << 52) | frac
    shift = 28 - e  # 42 <= shift <= 54
    q = sig >> shift
    rest = sig & ((1 << shift) - 1)
    tie = 1 << (shift - 1)
    if rest > tie or (rest == tie and (q & 1)):
        q += 1  # q == 1024 lands on the smallest normal, which is correct
    return sign | q


def _f16_bits_to_float(h: int) -> float:
    """Decode a binary16 bit pattern to the exactly representable float64."""
    sign = -1.0 if (h & 0x8000) else 1.0
    exp = (h >> 10) & 0x1F
    frac = h & 0x3FF
    if exp == 0:
        return sign * frac * 2.0 ** -24
    if exp == 31:
        return sign * math.inf if frac == 0 else math.nan
    return sign * (1024 + frac) * 2.0 ** (exp - 25)


@dataclass(frozen=True)
class Half:
    """A binary16 value, stored as its 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"half bit pattern out of range: {self.bits!r}")

    @classmethod
    def from_float(cls, x: float) -> "Half":
        (b,) = struct.unpack("<Q", struct.pack("<d", float(x)))
        return cls(_f64_bits_to_f16_bits(b))

    @property
    def value(self) -> float:
        return _f16_bits_to_float(self.bits)

    def __float__(self) -> float:
        return self.value


def half_round(x: float) -> Half:
    """Round a float64 to the nearest binary16 (ties to even, overflow to inf)."""
    return Half.from_float(x)


def half_round_value(x: float) -> float:
    """Round through binary16 and return the (exact) float64 value."""
    return Half.from_float(x).value


def half_round_array(x) -> np.ndarray:
    """Vectorised ``half_round_value`` for float64 arrays.

    Same integer algorithm as the scalar path, run on uint64 views, so the
    two agree bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    b = x.view(np.uint64) if x.flags["C_CONTIGUOUS"] else np.ascontiguousarray(x).view(np.uint64)
    sign_neg = (b >> np.uint64(63)) & np.uint64(1)
    exp = (b >> np.uint64(52)) & np.uint64(0x7FF)
    frac = b & np.uint64(0xFFFFFFFFFFFFF)
    e = exp.astype(np.int64) - 1023

    out = np.empty(x.shape, dtype=np.float64)

    # Normal targets.
    normal = (e >= -14) & (e < 16) & (exp != 0x7FF)
    if np.any(normal):
        en = np.clip(e, -14, 15)  # lanes outside `normal` are masked below
        mant = (frac >> np.uint64(42)).astype(np.int64)
        rest = frac & np.uint64((1 << 42) - 1)
        h = ((en + 15) << 10) | mant
        tie = np.uint64(1 << 41)
        up = (rest > tie) | ((rest == tie) & ((h & 1) == 1))
        h = h + up.astype(np.int64)
        # Decode: h >= 1 << 15 means the carry overflowed into inf.
        hexp = h >> 10
        hfrac = h & 0x3FF
        val = np.where(
            hexp >= 31,
            np.inf,
            np.ldexp((1024 + hfrac).astype(np.float64), (hexp - 25).astype(np.int64)),
        )
        out = np.where(normal, val, out)

    # Subnormal targets (including rounding up into the smallest normal).
    sub = (e < -14) & (exp != 0x7FF)
    if np.any(sub):
        es = np.clip(e, -26, -15)
        sig = (np.uint64(1) << np.uint64(52)) | frac
        shift = (28 - es).astype(np.uint64)
        q = (sig >> shift).astype(np.int64)
        rest = sig & ((np.uint64(1) << shift) - np.uint64(1))
        tie = np.uint64(1) << (shift - np.uint64(1))
        up = (rest > tie) | ((rest == tie) & ((q & 1) == 1))
        q = q + up.astype(np.int64)
        val = np.ldexp(q.astype(np.float64), -24)
        val = np.where(e < -26, 0.0, val)
        out = np.where(sub, val, out)

    # Overflow, inf and NaN.
    out = np.where((e >= 16) & (exp != 0x7FF), np.inf, out)
    out = np.where((exp == 0x7FF) & (frac == 0), np.inf, out)
    sgn = np.where(sign_neg == 1, -1.0, 1.0)
    out = out * sgn
    out = np.where((exp == 0x7FF) & (frac != 0), np.nan, out)
    return out


# ---------------------------------------------------------------------------
# Reductions.

class Precision(Enum):
    EXACT = "exact"
    FP16 = "fp16"


class ReductionKind(Enum):
    RING = "ring"
    TREE = "tree"
    PERMUTED_ATOMIC = "permuted-atomic"


@dataclass(frozen=True)
class ReductionStrategy:
    """How partial results are combined across participants.

    RING combines sequentially in index order (n - 1 steps).  TREE combines
    pairwise in ceil(log2 n) levels.  PERMUTED_ATOMIC combines sequentially
    in a seed-keyed Fisher-Yates order, modelling the arrival order of
    hardware atomics (n - 1 steps).
    """

    kind: ReductionKind
    seed: int = 0

    def steps(self, n: int) -> int:
        if n < 1:
            raise ValueError("empty reduction")
        if self.kind is ReductionKind.TREE:
            return tree_steps(n)
        return ring_steps(n)


RING = ReductionStrategy(ReductionKind.RING)
TREE = ReductionStrategy(ReductionKind.TREE)


def permuted_atomic(seed: int) -> ReductionStrategy:
    return ReductionStrategy(ReductionKind.PERMUTED_ATOMIC, seed)


def ring_steps(n: int) -> int:
    if n < 1:
        raise ValueError("empty reduction")
    return n - 1


def tree_steps(n: int) -> int:
    if n < 1:
        raise ValueError("empty reduction")
    return math.ceil(math.log2(n)) if n > 1 else 0


def _exact_sum_vectors(vecs: list[np.ndarray]) -> np.ndarray:
    stacked = np.stack(vecs, axis=0)
    return np.array([math.fsum(stacked[:, j]) for j in range(stacked.shape[1])])


def _fp16_combine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return half_round_array(a + b)


def reduce(values, strategy: ReductionStrategy, precision: Precision = Precision.EXACT):
    """Combine equal-length vectors under a reduction strategy.

    Returns ``(result, steps)`` where ``steps`` counts sequential combine
    steps (RING / PERMUTED_ATOMIC) or combine levels (TREE).  EXACT results
    are order-independent by construction; FP16 rounds to binary16 after
    every combine and therefore depends on the order.  A single operand is
    returned unchanged with ``steps == 0``.
    """
    vecs = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in values]
    if not vecs:
        raise ValueError("empty reduction")
    width = vecs[0].shape[0]
    for v in vecs:
        if v.shape != (width,):
            raise ValueError("reduction operands must share one shape")
    n = len(vecs)
    steps = strategy.steps(n)
    if n == 1:
        return vecs[0].copy(), 0

    if precision is Precision.EXACT:
        return _exact_sum_vectors(vecs), steps

    if strategy.kind is ReductionKind.TREE:
        level = list(vecs)
        while len(level) > 1:
            nxt = []
            for i in range(0, len(level) - 1, 2):
                nxt.append(_fp16_combine(level[i], level[i + 1]))
            if len(level) % 2:
                nxt.append(level[-1])  # odd operand passes through unrounded
            level = nxt
        return level[0], steps

    if strategy.kind is ReductionKind.PERMUTED_ATOMIC:
        order = permutation(n, strategy.seed)
    else:
        order = list(range(n))
    acc = vecs[order[0]]
    for i in order[1:]:
        acc = _fp16_combine(acc, vecs[i])
    return acc, steps


def permuted_sum(values, seed: int, precision: Precision = Precision.FP16) -> float:
    """Sum scalars in a seed-keyed permuted order, rounding after each add.

    Models the arrival order of FP16 atomic adds.  EXACT precision returns
    the correctly rounded true sum, which is seed-independent.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("empty reduction")
    if precision is Precision.EXACT:
        return math.fsum(vals)
    order = permutation(len(vals), seed)
    acc = vals[order[0]]
    for i in order[1:]:
        acc = half_round_value(acc + vals[i])
    return acc
