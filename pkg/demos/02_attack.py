"""Train a small counter, then paste an optimized patch on a test scene.

Takes about four minutes on one CPU core:

    python demos/02_attack.py
"""
import numpy as np

from crowdpatch.attack import AttackConfig, random_patch, apply_patch, run_whitebox_attack
from crowdpatch.models import ModelSpec, TrainConfig, build_model, predict_density, train
from crowdpatch.scenes import make_dataset, split_indices

spacer = "-" * 60

scenes = make_dataset(seed=1, n=200, h=64, w=64, count_range=(3, 15), style="mixed")
split = split_indices(len(scenes))
train_set = [scenes[i] for i in split["train"]]
test_set = [scenes[i] for i in split["test"]]
print(f"{len(train_set)} training scenes, {len(test_set)} test scenes, 64x64 pixels")

model, trace = train(build_model(ModelSpec("multi_column", seed=0)), train_set,
                     TrainConfig(epochs=30, seed=0))
print(f"training loss {trace[0]:.4f} -> {trace[-1]:.4f}")

print(spacer)
cfg = AttackConfig(side=14, iterations=150, seed=0)
print(f"patch side 14 covers {14 * 14 / 64 ** 2:.1%} of the image")
print(f"{'true':>5} {'clean':>7} {'noise':>7} {'optimized':>10}   objective first -> best")
for scene in test_set[:4]:
    clean = predict_density(model, scene.image).sum()
    noise = predict_density(model, apply_patch(scene.image, random_patch(cfg, (64, 64)))).sum()
    patch, adv, atrace = run_whitebox_attack(model, scene.image, scene.density, cfg)
    print(f"{scene.count:>5} {clean:>7.2f} {noise:>7.2f} {predict_density(model, adv).sum():>10.2f}"
          f"   {atrace.objective[0]:.4f} -> {atrace.best_so_far()[-1]:.4f}")

# The objective pulls the density map toward ten times the true one, so on a
# sparse scene extra mass away from the few people can cost more than it gains.
# When no step beats the starting point, the starting patch is what comes back.
print(spacer)
print("Predicted count along the last attack (every 25 steps):")
print(np.round(atrace.predicted_count[::25], 2))
