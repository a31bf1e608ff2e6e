"""APAM: adversarial patch attack with momentum on density regressors.

A patch is blended with the image region it covers through a per-pixel
interpolation tensor beta in (0, 1), masked, rotated, rescaled and pasted:

    blended = beta * p + (1 - beta) * region
    placed  = resize(rotate(mask * blended))
    x_adv   = placed + (1 - resize(rotate(mask))) * x

The patch pixels and beta's pre-activations are optimized with
momentum-accumulated, L1-normalized gradient sign steps that descend

    mean_i MSE(f_i(x_adv), alpha * gt) + gamma * smoothness(beta)
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .io import PATCH_MAGIC, read_container, write_container
from .models import target_map


@dataclass
class PatchSpec:
    pixels: np.ndarray  # (C, s, s) in [0, 1]
    mask: np.ndarray  # (s, s) binary
    beta_pre: np.ndarray  # (C, s, s), beta = sigmoid(beta_pre)
    loc: tuple[int, int] = (0, 0)  # top-left of the placed footprint
    scale: float = 1.0
    angle_deg: float = 0.0
    seed: int = 0

    @property
    def side(self) -> int:
        return self.pixels.shape[-1]

    @property
    def beta(self) -> np.ndarray:
        return T.sigmoid(self.beta_pre)

    @property
    def footprint(self) -> int:
        return footprint_side(self.side, self.scale)

    def copy(self) -> "PatchSpec":
        return replace(self, pixels=self.pixels.copy(), mask=self.mask.copy(),
                       beta_pre=self.beta_pre.copy())


@dataclass(frozen=True)
class AttackConfig:
    target_factor: float = 10.0
    gamma: float = 0.01
    step: float = 0.03
    beta_step_scale: float = 3.0  # beta pre-activations (logits) move this many times faster
    momentum: float = 0.9
    iterations: int = 300
    side: int = 28
    placement: str = "fixed"  # or "random" (new location per restart)
    restarts: int = 1
    seed: int = 0
    angle_range: tuple[float, float] = (-20.0, 20.0)
    scale_range: tuple[float, float] = (0.8, 1.25)
    transform: bool = True  # resample rotation/scale every iteration
    shape: str = "square"  # or "circle"
    batch_size: int = 8  # images per step for universal patches

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum decay must lie in [0, 1)")
        if self.step < 0 or self.beta_step_scale < 0:
            raise ValueError("step sizes must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.side < 2:
            raise ValueError("patch side must be >= 2")
        if self.placement not in ("fixed", "random"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class AttackTrace:
    objective: list[float] = field(default_factory=list)
    predicted_count: list[float] = field(default_factory=list)
    zero_grad: list[bool] = field(default_factory=list)
    adversarial: Optional[np.ndarray] = None

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.objective))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "predicted_count"])
            for i, (o, c) in enumerate(zip(self.objective, self.predicted_count)):
                w.writerow([i, repr(o), repr(c)])


def footprint_side(side: int, scale: float) -> int:
    return max(1, int(round(side * scale)))


def patch_fraction(side: int, h: int, w: int) -> float:
    return side * side / (h * w)


def side_for_fraction(fraction: float, h: int, w: int) -> int:
    return max(2, int(round(math.sqrt(fraction * h * w))))


def make_mask(side: int, shape: str = "square") -> np.ndarray:
    if shape == "square":
        return np.ones((side, side))
    if shape == "circle":
        c = (side - 1) / 2.0
        yy, xx = np.mgrid[0:side, 0:side]
        return (np.hypot(yy - c, xx - c) <= side / 2.0).astype(float)
    raise ValueError(f"unknown patch shape {shape!r}")


def init_patch(cfg: AttackConfig, canvas: Optional[tuple[int, int]] = None,
               channels: int = 3, restart: int = 0) -> PatchSpec:
    """Uniform-noise pixels, mask by shape policy, beta = 0.5 everywhere.

    The patch is placed at the canvas center (``fixed``) or at a seeded
    random spot (``random``); either way the largest transformed footprint
    still fits.
    """
    rng = np.random.default_rng([cfg.seed, restart])
    s = cfg.side
    pixels = rng.uniform(0.0, 1.0, size=(channels, s, s))
    loc = (0, 0)
    if canvas is not None:
        h, w = canvas
        big = footprint_side(s, max(cfg.scale_range[1], 1.0) if cfg.transform else 1.0)
        if big > h or big > w:
            raise ValueError(f"patch footprint {big}x{big} does not fit the {h}x{w} canvas")
        if cfg.placement == "random":
            center = (rng.uniform(big / 2, h - big / 2), rng.uniform(big / 2, w - big / 2))
        else:
            center = (h / 2.0, w / 2.0)
        loc = _loc_for(center, s, 1.0, h, w)
    return PatchSpec(pixels, make_mask(s, cfg.shape), np.zeros((channels, s, s)), loc,
                     1.0, 0.0, cfg.seed)


def _loc_for(center, side, scale, h, w):
    f = footprint_side(side, scale)
    r = int(round(center[0] - f / 2.0))
    c = int(round(center[1] - f / 2.0))
    return min(max(r, 0), h - f), min(max(c, 0), w - f)


def _center_of(patch: PatchSpec) -> tuple[float, float]:
    f = patch.footprint
    return patch.loc[0] + f / 2.0, patch.loc[1] + f / 2.0


def upright(patch: PatchSpec, canvas: tuple[int, int]) -> PatchSpec:
    """Copy of ``patch`` with no rotation, unit scale and the same centre."""
    out = patch.copy()
    out.loc = _loc_for(_center_of(patch), patch.side, 1.0, *canvas)
    out.angle_deg, out.scale = 0.0, 1.0
    return out


# ---------------------------------------------------------------- forward pieces

def apply_patch(image, patch: PatchSpec, pixels=None, beta_pre=None):
    """Paste ``patch`` into ``image`` (C, H, W) or a batch (N, C, H, W).

    ``pixels`` / ``beta_pre`` may be tape variables standing in for the
    patch's arrays, which makes the result differentiable in them. Pixels
    outside the placed footprint are copied from ``image`` unchanged.
    """
    img = np.asarray(image, dtype=float)
    p = patch.pixels if pixels is None else pixels
    b = patch.beta_pre if beta_pre is None else beta_pre
    s = patch.side
    f = patch.footprint
    r0, c0 = patch.loc
    h, w = img.shape[-2:]
    if r0 < 0 or c0 < 0 or r0 + f > h or c0 + f > w:
        raise ValueError(f"patch footprint {f}x{f} at {patch.loc} exits the {h}x{w} canvas")
    window = img[..., r0 : r0 + f, c0 : c0 + f]
    region = window if f == s else T.bilinear_resize(window, s, s)
    beta = T.sigmoid(b)
    blended = T.add(T.mul(beta, p), T.mul(T.add(1.0, T.mul(beta, -1.0)), region))
    masked = T.mul(blended, patch.mask)
    mask = patch.mask
    if patch.angle_deg != 0.0:
        masked = T.rotate(masked, patch.angle_deg)
        mask = T.rotate(mask, patch.angle_deg)
    if f != s:
        masked = T.bilinear_resize(masked, f, f)
        mask = T.bilinear_resize(mask, f, f)
    inside = T.add(masked, (1.0 - mask) * window)
    return T.paste(img, T.clip(inside, 0.0, 1.0), r0, c0)


def smoothness_loss(beta):
    """Sum of squared differences between horizontal and vertical neighbours.

    ``beta`` is (C, H, W); the sum runs over channels too.
    """
    bv = T.value_of(beta)
    if bv.ndim != 3:
        raise ValueError(f"beta must be rank 3, got shape {bv.shape}")
    dh = T.add(beta[:, :, 1:], T.mul(beta[:, :, :-1], -1.0)) if isinstance(beta, T.Var) else bv[:, :, 1:] - bv[:, :, :-1]
    dv = T.add(beta[:, 1:, :], T.mul(beta[:, :-1, :], -1.0)) if isinstance(beta, T.Var) else bv[:, 1:, :] - bv[:, :-1, :]
    if isinstance(beta, T.Var):
        return T.add(T.square(dh).sum(), T.square(dv).sum())
    return float((dh**2).sum() + (dv**2).sum())


def _forward(model, x):
    return model.forward(x) if hasattr(model, "forward") else model(x)


def mse(pred, target):
    diff = T.add(pred, -np.asarray(target, float))
    n = T.value_of(diff).size
    return T.mul(T.square(diff).sum(), 1.0 / n) if isinstance(diff, T.Var) else float((diff**2).mean())


def apam_objective(models: Sequence, adv, target_map, gamma: float, beta):
    """(1/n) sum_i MSE(f_i(adv), target) + gamma * smoothness(beta)."""
    if len(models) == 0:
        raise ValueError("need at least one model")
    return _objective([_forward(m, adv) for m in models], target_map, gamma, beta)


def _objective(preds, target_map, gamma, beta):
    terms = [mse(p, target_map) for p in preds]
    j = terms[0]
    for t in terms[1:]:
        j = T.add(j, t)
    j = T.mul(j, 1.0 / len(terms))
    if gamma == 0:
        return j
    return T.add(j, T.mul(smoothness_loss(beta), gamma))


# ---------------------------------------------------------------- optimizer

def momentum_step(q: np.ndarray, grad: np.ndarray, mu: float, eps: float,
                  params: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """q' = mu*q + grad/||grad||_1 and params' = params - eps*sign(q').

    A zero gradient leaves q' = mu*q and the params untouched; the third
    return value flags that case.
    """
    if q.shape != grad.shape or grad.shape != params.shape:
        raise ValueError(f"shape mismatch: q {q.shape}, grad {grad.shape}, params {params.shape}")
    norm = np.abs(grad).sum()
    if norm == 0 or not np.isfinite(norm):
        return mu * q, params.copy(), True
    q_new = mu * q + grad / norm
    return q_new, params - eps * np.sign(q_new), False


# ---------------------------------------------------------------- drivers

def _optimize(models: Sequence, images: np.ndarray, targets: np.ndarray,
              cfg: AttackConfig, restart: int,
              start: Optional[PatchSpec] = None) -> tuple[PatchSpec, float, AttackTrace]:
    h, w = images.shape[-2:]
    patch = init_patch(cfg, (h, w), images.shape[-3], restart) if start is None else start.copy()
    center = _center_of(patch)
    rng = np.random.default_rng([cfg.seed, restart, 1])
    batch_rng = np.random.default_rng([cfg.seed, restart, 2])
    qp = np.zeros_like(patch.pixels)
    qb = np.zeros_like(patch.beta_pre)
    trace = AttackTrace()
    best, best_obj = patch.copy(), math.inf
    n_img = len(images)
    for _ in range(cfg.iterations):
        if cfg.transform:
            angle = float(rng.uniform(*cfg.angle_range))
            scale = float(rng.uniform(*cfg.scale_range))
        else:
            angle, scale = 0.0, 1.0
        patch.angle_deg, patch.scale = angle, scale
        patch.loc = _loc_for(center, patch.side, scale, h, w)
        if n_img > cfg.batch_size:
            idx = np.sort(batch_rng.choice(n_img, cfg.batch_size, replace=False))
        else:
            idx = np.arange(n_img)
        tape = T.Tape()
        pv = tape.variable(patch.pixels)
        bv = tape.variable(patch.beta_pre)
        adv = apply_patch(images[idx], patch, pv, bv)
        preds = [_forward(m, adv) for m in models]
        obj = _objective(preds, targets[idx], cfg.gamma, T.sigmoid(bv))
        val = float(obj.value)
        pred = np.mean([T.value_of(p).sum(axis=(-2, -1)).mean() for p in preds])
        trace.objective.append(val)
        trace.predicted_count.append(float(pred))
        if val < best_obj:
            best, best_obj = patch.copy(), val
        grads = T.backward(tape, obj)
        qp, new_pixels, z1 = momentum_step(qp, grads[pv], cfg.momentum, cfg.step, patch.pixels)
        qb, new_beta, z2 = momentum_step(qb, grads[bv], cfg.momentum, cfg.step * cfg.beta_step_scale,
                                         patch.beta_pre)
        trace.zero_grad.append(z1 and z2)
        patch.pixels = np.clip(new_pixels, 0.0, 1.0)
        patch.beta_pre = new_beta
    return best, best_obj, trace


def _run(models, images, targets, cfg, start=None):
    best = None
    for r in range(cfg.restarts):
        patch, obj, trace = _optimize(models, images, targets, cfg, r, start)
        if best is None or obj < best[1]:
            best = (patch, obj, trace)
    return best


def run_whitebox_attack(model, image: np.ndarray, gt_density: np.ndarray,
                        cfg: AttackConfig) -> tuple[PatchSpec, np.ndarray, AttackTrace]:
    """Optimize one patch against ``model`` on ``image``.

    Returns the best-objective patch, the adversarial image it produces and
    the trace of the winning restart.
    """
    target = cfg.target_factor * target_map(gt_density)
    patch, _, trace = _run([model], np.asarray(image, float)[None], target[None], cfg)
    adv = apply_patch(image, patch)
    trace.adversarial = adv
    return patch, adv, trace


def run_blackbox_attack(substitutes: Sequence, images: Sequence[np.ndarray],
                        gt_densities: Sequence[np.ndarray], cfg: AttackConfig,
                        return_trace: bool = False, start: Optional[PatchSpec] = None):
    """Universal patch minimizing the substitute-averaged objective.

    Each step draws ``cfg.batch_size`` images (all of them if fewer).
    ``start`` resumes from an existing patch instead of a fresh one.
    """
    if len(substitutes) == 0:
        raise ValueError("need at least one substitute model")
    imgs = np.stack([np.asarray(i, float) for i in images])
    targets = np.stack([cfg.target_factor * target_map(g) for g in gt_densities])
    patch, _, trace = _run(list(substitutes), imgs, targets, cfg, start)
    return (patch, trace) if return_trace else patch


def random_patch(cfg: AttackConfig, canvas: tuple[int, int], channels: int = 3) -> PatchSpec:
    """Unoptimized uniform-noise baseline with beta pushed to 1 (a hard patch)."""
    patch = init_patch(replace(cfg, transform=False), canvas, channels)
    patch.beta_pre = np.full_like(patch.beta_pre, 40.0)
    return patch


def attack_counts(predict: Callable, images: Sequence[np.ndarray], patch: PatchSpec) -> np.ndarray:
    return np.array([float(np.sum(predict(apply_patch(img, patch)))) for img in images])


# ---------------------------------------------------------------- files

def save_patch(path, patch: PatchSpec) -> None:
    header = {
        "loc": f"{patch.loc[0]},{patch.loc[1]}",
        "scale": repr(patch.scale),
        "angle": repr(patch.angle_deg),
        "s": str(patch.side),
        "seed": str(patch.seed),
    }
    write_container(path, PATCH_MAGIC, header, [patch.pixels, patch.mask, patch.beta_pre])


def load_patch(path) -> PatchSpec:
    header, tensors = read_container(path, PATCH_MAGIC)
    if len(tensors) != 3:
        raise ValueError(f"{path}: expected 3 tensors (pixels, mask, beta), found {len(tensors)}")
    r, c = (int(v) for v in header["loc"].split(","))
    pixels, mask, beta_pre = tensors
    if pixels.shape[-1] != int(header["s"]):
        raise ValueError(f"{path}: header s={header['s']} disagrees with pixel tensor {pixels.shape}")
    return PatchSpec(pixels, mask, beta_pre, (r, c), float(header["scale"]),
                     float(header["angle"]), int(header["seed"]))
