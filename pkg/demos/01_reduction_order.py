"""Why half-precision parallel sums are not a single number.

Floating-point addition is not associative: rounding after every combine
means the final value depends on the order in which partial results meet.
This demo builds the smallest interesting case — one large value and two
tiny ones whose sum straddles a binary16 rounding boundary — and shows how
ring, tree, and randomly-ordered atomic reductions land on different
answers, while exact accumulation is order-free by construction.
"""

import numpy as np

from neoxfuse import (
    RING,
    TREE,
    Precision,
    half_round_value,
    permuted_sum,
    reduce,
    ring_steps,
    tree_steps,
)

values = [1.0, 2.0 ** -11, 2.0 ** -11]

print("operands:", values)
print()

# In binary16 the mantissa of 1.0 resolves steps of 2^-10.  Adding one
# 2^-11 rounds back down to 1.0 (round-to-nearest-even); adding both tiny
# values FIRST yields 2^-10, which survives.
print("half(1.0 + 2^-11)          =", half_round_value(values[0] + values[1]))
print("half(2^-11 + 2^-11)        =", half_round_value(values[1] + values[2]))
print("half(1.0 + 2^-10)          =", half_round_value(1.0 + 2.0 ** -10))
print()

ring_out, ring_n = reduce(values, RING, Precision.FP16)
tree_out, tree_n = reduce(values, TREE, Precision.FP16)
print(f"ring  (left-to-right) -> {float(ring_out[0]):.10f}  in {ring_n} steps")
print(f"tree  (pairwise)      -> {float(tree_out[0]):.10f}  in {tree_n} steps")

exact_out, _ = reduce(values, RING, Precision.EXACT)
print(f"exact (any order)     -> {float(exact_out[0]):.10f}")
print()

# Atomic accumulation is a reduction whose order nobody chose: whichever
# thread block commits first, wins.  Model it as a seeded random permutation
# and sweep the seed.
outcomes = {}
for seed in range(100):
    out = permuted_sum(values, seed=seed, precision=Precision.FP16)
    outcomes[out] = outcomes.get(out, 0) + 1
print("atomic-order sweep over 100 seeds:")
for value, count in sorted(outcomes.items()):
    print(f"  {value:.10f}  x{count}")
print()

# Step-count structure: a ring visits operands one at a time; a tree halves
# the operand count every level.
for n in (4, 16, 37, 1024):
    print(f"n={n:5d}: ring {ring_steps(n):4d} steps, tree {tree_steps(n):2d} levels")
print()

# Larger random sums: exact stays put, fp16 wobbles with the seed.
rng = np.random.default_rng(0)
vals = [float(v) for v in rng.standard_normal(64)]
exact = permuted_sum(vals, seed=0, precision=Precision.EXACT)
spread = {permuted_sum(vals, seed=s) for s in range(200)}
print(f"64 random operands: exact sum {exact:+.9f}")
print(f"fp16 atomic orders produce {len(spread)} distinct sums spanning "
      f"[{min(spread):+.9f}, {max(spread):+.9f}]")
