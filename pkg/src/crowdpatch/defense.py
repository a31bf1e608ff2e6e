"""Randomized ablation: keep k random spatial pixels, replace the rest with the
training-set mean pixel, and train/predict on such images.

Also home to the adversarial-training baseline used for comparison.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attack import AttackConfig, apply_patch, init_patch, run_blackbox_attack, upright
from .models import (Model, NonFiniteLoss, Optimizer, TrainConfig, build_model,
                     epoch_objective, load_model, save_model, stack_dataset, _batches)
from .scenes import Scene

log = logging.getLogger(__name__)

DEFAULT_ROUNDS = 10
SIDECAR_SUFFIX = ".defense.txt"


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class RetentionSet:
    d: int
    k: int
    indices: np.ndarray  # k distinct flat spatial indices in [0, d), in draw order

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if len(idx) != self.k:
            raise ValueError(f"retention set holds {len(idx)} indices, expected k={self.k}")
        if self.k and (idx.min() < 0 or idx.max() >= self.d):
            raise ValueError(f"retention indices must lie in [0, {self.d})")

    def mask(self, h: int, w: int) -> np.ndarray:
        """Boolean (h, w) map of the retained pixels."""
        if h * w != self.d:
            raise ValueError(f"retention set over d={self.d} pixels does not fit a {h}x{w} image")
        out = np.zeros(self.d, dtype=bool)
        out[self.indices] = True
        return out.reshape(h, w)


def sample_retention(d: int, k: int, seed=None) -> RetentionSet:
    """Uniform k-subset of range(d) by a partial Fisher-Yates shuffle.

    Only the touched slots are stored, so the cost is O(k) even for large d.
    ``seed`` may be an int or a numpy Generator (advanced in place).
    """
    if d < 0 or k < 0:
        raise ValueError("d and k must be non-negative")
    if k > d:
        raise ValueError(f"cannot retain k={k} of d={d} pixels")
    rng = _rng(seed)
    picks = rng.integers(np.arange(k), d) if k else np.empty(0, dtype=np.int64)
    moved: dict[int, int] = {}
    out = np.empty(k, dtype=np.int64)
    for i, j in enumerate(picks.tolist()):
        out[i] = moved.get(j, j)
        moved[j] = moved.get(i, i)
    return RetentionSet(d, k, out)


@dataclass(frozen=True)
class NullEncoding:
    values: np.ndarray  # one mean value per channel

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("null encoding needs one finite value per channel")

    @classmethod
    def from_images(cls, images) -> "NullEncoding":
        arr = np.asarray(images, float)
        if arr.ndim == 3:
            arr = arr[None]
        return cls(arr.mean(axis=(0, 2, 3)))

    def fill(self, h: int, w: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.values, float)[:, None, None],
                               (len(self.values), h, w)).copy()


def ablate(image, keep: RetentionSet, null: NullEncoding):
    """Retained spatial pixels keep all channels; every other pixel becomes the null value.

    ``image`` may be an array or a tape variable of shape (C, H, W) or
    (N, C, H, W); with a batch the same retention set applies to every image.
    """
    shape = T.value_of(image).shape
    h, w = shape[-2:]
    if len(null.values) != shape[-3]:
        raise ValueError(f"null encoding has {len(null.values)} channels, image has {shape[-3]}")
    m = keep.mask(h, w).astype(float)
    fill = (1.0 - m) * np.asarray(null.values, float)[:, None, None]
    if isinstance(image, T.Var):
        return T.add(T.mul(image, m), fill)
    return np.where(m.astype(bool), np.asarray(image, float), fill)


def ablate_batch(images: np.ndarray, k: int, null: NullEncoding, rng) -> np.ndarray:
    """Independently ablate every image of an (N, C, H, W) batch."""
    h, w = images.shape[-2:]
    return np.stack([ablate(x, sample_retention(h * w, k, rng), null) for x in images])


def retention_k(fraction: float, h: int, w: int) -> int:
    return max(1, int(round(fraction * h * w)))


# ---------------------------------------------------------------- defended models

@dataclass
class DefendedModel:
    """A model that only ever sees ablated inputs."""

    model: Model
    k: int
    null: NullEncoding
    rounds: int = DEFAULT_ROUNDS
    d: int = 0  # spatial pixels of the training images

    def predict(self, image, seed=0) -> np.ndarray:
        return defended_predict(self.model, image, self.k, self.rounds, seed, self.null)

    def attack_view(self, seed=0, rounds: int = 1) -> "AblatedModel":
        return AblatedModel(self, seed, rounds)


class AblatedModel:
    """Differentiable stand-in for a defended model, for adaptive attacks.

    Each call draws ``rounds`` fresh retention sets and averages the model's
    output over them, so gradient steps see the ablation as a random transform.
    """

    def __init__(self, defended: DefendedModel, seed=0, rounds: int = 1):
        self.defended = defended
        self.rng = np.random.default_rng(seed)
        self.rounds = rounds

    def __call__(self, x):
        shape = T.value_of(x).shape
        d = shape[-2] * shape[-1]
        out = None
        for _ in range(self.rounds):
            keep = sample_retention(d, self.defended.k, self.rng)
            y = self.defended.model.forward(ablate(x, keep, self.defended.null))
            out = y if out is None else T.add(out, y)
        return out if self.rounds == 1 else T.mul(out, 1.0 / self.rounds)


def defended_predict(model: Model, image, k: int, rounds: int = DEFAULT_ROUNDS, seed=0,
                     null: Optional[NullEncoding] = None) -> np.ndarray:
    """Mean density map over ``rounds`` independent ablations of ``image``.

    Works on one image or a batch (each image gets its own retention sets).
    Without ``null`` the image's own channel means stand in.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    img = np.asarray(image, float)
    single = img.ndim == 3
    batch = img[None] if single else img
    if null is None:
        null = NullEncoding.from_images(batch)
    rng = _rng(seed)
    total = None
    for _ in range(rounds):
        y = np.asarray(model.forward(ablate_batch(batch, k, null, rng)))
        total = y if total is None else total + y
    out = total / rounds
    return out[0] if single else out


def certificate_retrain(spec_or_model, scenes: Sequence[Scene], k: int, cfg: TrainConfig,
                        rounds: int = DEFAULT_ROUNDS) -> DefendedModel:
    """Train on images re-ablated with fresh retention sets every epoch.

    The null encoding is the per-channel mean of the raw training images.
    """
    from .models import train

    model = spec_or_model if isinstance(spec_or_model, Model) else build_model(spec_or_model)
    images, _ = stack_dataset(scenes)
    h, w = images.shape[-2:]
    if not 0 <= k <= h * w:
        raise ValueError(f"k={k} is not in [0, {h * w}] for {h}x{w} images")
    null = NullEncoding.from_images(images)

    def transform(batch, epoch):
        return ablate_batch(batch, k, null, np.random.default_rng([cfg.seed, epoch, 7]))

    trained, trace = train(model, scenes, cfg, transform=transform)
    log.info("certificate retraining done, final loss %.6g", trace[-1])
    return DefendedModel(trained, k, null, rounds, h * w)


def save_defended(path, dm: DefendedModel) -> None:
    """PCM1 checkpoint plus a ``key=value`` sidecar with k, d, rounds and the null pixel."""
    save_model(path, dm.model)
    lines = [f"k={dm.k}", f"d={dm.d}", f"rounds={dm.rounds}",
             "null=" + ",".join(repr(float(v)) for v in dm.null.values)]
    Path(str(path) + SIDECAR_SUFFIX).write_text("\n".join(lines) + "\n")


def load_defended(path) -> DefendedModel:
    model = load_model(path)
    side = Path(str(path) + SIDECAR_SUFFIX)
    if not side.exists():
        raise FileNotFoundError(f"{path}: missing defense sidecar {side.name}")
    meta = dict(line.split("=", 1) for line in side.read_text().splitlines() if "=" in line)
    null = NullEncoding(np.array([float(v) for v in meta["null"].split(",")]))
    return DefendedModel(model, int(meta["k"]), null, int(meta["rounds"]), int(meta["d"]))


# ---------------------------------------------------------------- adversarial training baseline

def lambda_schedule(epoch: int, warmup: int, ramp: int) -> float:
    """1 during warm-up, then linearly down to 0.5 over ``ramp`` epochs, then 0.5."""
    if warmup < 0 or ramp < 0:
        raise ValueError("warm-up and ramp lengths must be >= 0")
    if epoch < warmup:
        return 1.0
    if ramp == 0 or epoch >= warmup + ramp:
        return 0.5
    return 1.0 - 0.5 * (epoch - warmup) / ramp


def adversarial_train(spec_or_model, scenes: Sequence[Scene], cfg: TrainConfig,
                      attack_cfg: AttackConfig, warmup: int, ramp: int):
    """Minimize lambda * clean_loss + (1 - lambda) * adv_loss.

    After warm-up, a universal patch is re-optimized against the current
    model at the start of every epoch (warm-started from the previous epoch's
    patch, ``attack_cfg.iterations`` steps) and pasted into every training
    image for the adversarial term. Returns the model and the lambda trace.
    """
    model = spec_or_model if isinstance(spec_or_model, Model) else build_model(spec_or_model)
    model = model.copy()
    images, targets = stack_dataset(scenes)
    gts = [s.density for s in scenes]
    n = len(images)
    opt = Optimizer(model.params, cfg)
    patch = None
    lambdas = []
    for epoch in range(cfg.epochs):
        lam = lambda_schedule(epoch, warmup, ramp)
        lambdas.append(lam)
        adv = None
        if lam < 1.0:
            acfg = replace(attack_cfg, seed=attack_cfg.seed + epoch)
            if patch is None:
                patch = init_patch(acfg, images.shape[-2:], images.shape[-3])
            patch = run_blackbox_attack([model], images, gts, acfg, start=patch)
            adv = apply_patch(images, upright(patch, images.shape[-2:]))
        for bi, idx in enumerate(_batches(n, cfg, epoch)):
            loss, grads = epoch_objective(model, images, targets, idx, len(idx), lam)
            if adv is not None:
                aloss, agrads = epoch_objective(model, adv, targets, idx, len(idx), 1.0 - lam)
                loss += aloss
                grads = {key: grads[key] + agrads[key] for key in grads}
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step(model.params, grads)
    return model, lambdas
