"""How often does a random ablation miss a patch entirely?

Keep k of d pixels at random. A patch covering n pixels is invisible to the
model whenever none of the kept pixels land on it. Run with:

    python demos/01_bounds.py
"""
import math

import numpy as np

from crowdpatch import bounds
from crowdpatch.defense import sample_retention

spacer = "-" * 60

print("Miss probability and all-inside probability for a megapixel-scale image")
print(f"d = {bounds.REFERENCE_D}, k = {bounds.REFERENCE_K}")
for side in bounds.REFERENCE_SIDES:
    n = side * side
    up = bounds.upper_bound(bounds.REFERENCE_D, n, bounds.REFERENCE_K)
    lo = bounds.log10_lower_bound(bounds.REFERENCE_D, n, bounds.REFERENCE_K)
    print(f"  patch {side:>3}x{side:<3} n={n:>6}  miss={up:.4f}  all-inside=10^{lo:.2f}")

print(spacer)
print("The factorials behind C(d, k) overflow a double long before the ratios do,")
print("so everything is computed with logarithms:")
print("  ln C(716800, 45) =", bounds.log_choose(716_800, 45))
print("  exact check      =", math.log(math.comb(716_800, 45)))

print(spacer)
print("Monte-Carlo check on a tiny image: d=64, patch n=8, keep k=4")
rng = np.random.default_rng(0)
patch = set(range(8))
trials = 20_000
misses = sum(not patch.intersection(sample_retention(64, 4, rng).indices.tolist()) for _ in range(trials))
p = bounds.upper_bound(64, 8, 4)
print(f"  empirical {misses / trials:.4f}  closed form {p:.4f}  "
      f"(3 sigma = {3 * math.sqrt(p * (1 - p) / trials):.4f})")

print(spacer)
print("Which image size do the tabulated miss probabilities imply?")
targets = {s * s: v for s, v in zip(bounds.REFERENCE_SIDES, (0.9752, 0.9043, 0.6611, 0.1827))}
d, err = bounds.fit_d(targets, bounds.REFERENCE_K, 500_000, 1_000_000)
print(f"  best d = {d}, worst relative error {err:.2e}")
