"""Ablation in pictures: what the defended model actually sees.

    python demos/03_defense.py
"""
import numpy as np

from crowdpatch.attack import AttackConfig, apply_patch, random_patch
from crowdpatch.defense import NullEncoding, ablate, sample_retention
from crowdpatch.scenes import make_scene

spacer = "-" * 60

scene = make_scene(seed=4, count=10, h=32, w=32)
null = NullEncoding.from_images(scene.image)
print("mean pixel used for every dropped position:", np.round(null.values, 3))

keep = sample_retention(32 * 32, 40, seed=0)
print(f"kept {keep.k} of {keep.d} pixels")

patch = random_patch(AttackConfig(side=8, transform=False), (32, 32))
attacked = apply_patch(scene.image, patch)
r, c = patch.loc
footprint = np.zeros((32, 32), bool)
footprint[r : r + 8, c : c + 8] = True

print(spacer)
hits = int((keep.mask(32, 32) & footprint).sum())
print(f"kept pixels inside the patch: {hits}")
same = np.array_equal(ablate(scene.image, keep, null), ablate(attacked, keep, null))
print("ablated clean == ablated attacked:", same)

print(spacer)
print("Repeat with fresh retention sets and count the misses:")
rng = np.random.default_rng(1)
misses = identical = 0
for _ in range(2000):
    s = sample_retention(32 * 32, 40, rng)
    miss = not (s.mask(32, 32) & footprint).any()
    misses += miss
    identical += miss and np.array_equal(ablate(scene.image, s, null), ablate(attacked, s, null))
print(f"misses {misses}/2000, and every miss gave identical inputs: {misses == identical}")
