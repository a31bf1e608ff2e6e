"""Synthetic crowd scenes with head annotations and Gaussian density maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import erf

DEFAULT_SIGMA = 4.0
DEFAULT_SIZE = 128
MIN_SEPARATION = 5.0
MAX_RETRIES = 2000
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
TEXTURE_AMPLITUDE = 0.12
TEXTURE_SCALE = 8.0
FIGURE_CONTRAST = (0.25, 0.45)
CLUSTER_SPREAD = 6.0
CLUSTER_SIZE = 12


class PlacementError(RuntimeError):
    pass


@dataclass
class Scene:
    image: np.ndarray  # (C, H, W) in [0, 1]
    points: np.ndarray  # (count, 2) of (row, col)
    density: np.ndarray  # (H, W)
    seed: int = 0

    @property
    def count(self) -> int:
        return len(self.points)


def _place_points(rng, count, h, w, style, margin=2.0):
    pts = np.empty((0, 2))
    lo = np.array([margin, margin])
    hi = np.array([h - 1 - margin, w - 1 - margin])
    if style == "clustered":
        n_clusters = max(1, int(round(count / CLUSTER_SIZE)))
        centers = rng.uniform(lo + 8, hi - 8, size=(n_clusters, 2))
        spread = CLUSTER_SPREAD
    elif style != "uniform":
        raise ValueError(f"unknown style {style!r}")
    for i in range(count):
        for _ in range(MAX_RETRIES):
            if style == "clustered":
                cand = centers[i % n_clusters] + rng.normal(0.0, spread, size=2)
            else:
                cand = rng.uniform(lo, hi)
            if np.any(cand < lo) or np.any(cand > hi):
                continue
            if len(pts) and np.min(np.hypot(*(pts - cand).T)) < MIN_SEPARATION:
                continue
            pts = np.vstack([pts, cand])
            break
        else:
            raise PlacementError(
                f"could not place figure {i + 1} of {count} on a {h}x{w} canvas "
                f"after {MAX_RETRIES} retries"
            )
    return pts


def synth_scene(seed: int, count: int, h: int = DEFAULT_SIZE, w: int = DEFAULT_SIZE,
                style: str = "uniform", channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Render ``count`` blob figures on a textured background.

    Returns the (C, H, W) image and the (count, 2) head positions. The output
    is a pure function of the arguments.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if h < 32 or w < 32:
        raise ValueError(f"canvas must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.35, 0.75, size=(channels, 1, 1))
    noise = np.stack([gaussian_filter(rng.standard_normal((h, w)), TEXTURE_SCALE) for _ in range(channels)])
    noise /= max(np.abs(noise).max(), 1e-12)
    image = base + TEXTURE_AMPLITUDE * noise
    points = _place_points(rng, count, h, w, style)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    for r, c in points:
        ry, rx = rng.uniform(2.0, 3.0), rng.uniform(1.5, 2.5)
        # figures are either darker or brighter than the background
        sign = rng.choice((-1.0, 1.0))
        color = np.clip(base + sign * rng.uniform(*FIGURE_CONTRAST, size=(channels, 1, 1)), 0.0, 1.0)
        # head blob plus a fainter body below it
        head = np.exp(-0.5 * (((yy - r) / ry) ** 2 + ((xx - c) / rx) ** 2))
        body = 0.6 * np.exp(-0.5 * (((yy - r - 2.5 * ry) / (1.6 * ry)) ** 2 + ((xx - c) / (1.3 * rx)) ** 2))
        alpha = 0.9 * np.maximum(head, body)
        image = image * (1 - alpha) + color * alpha
    return np.clip(image, 0.0, 1.0), points


def density_from_points(points: np.ndarray, sigma: float = DEFAULT_SIGMA,
                        h: int = DEFAULT_SIZE, w: int = DEFAULT_SIZE) -> np.ndarray:
    """Sum of unit-mass Gaussians, integrated over each pixel, truncated to the canvas.

    Pixel (i, j) covers [i - 0.5, i + 0.5] x [j - 0.5, j + 0.5].
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    out = np.zeros((h, w))
    s = sigma * np.sqrt(2.0)
    edges_r = np.arange(h + 1) - 0.5
    edges_c = np.arange(w + 1) - 0.5
    for r, c in points:
        pr = np.diff(0.5 * erf((edges_r - r) / s))
        pc = np.diff(0.5 * erf((edges_c - c) / s))
        out += np.outer(pr, pc)
    return out


def make_scene(seed: int, count: int, h: int = DEFAULT_SIZE, w: int = DEFAULT_SIZE,
               style: str = "uniform", sigma: float = DEFAULT_SIGMA) -> Scene:
    image, points = synth_scene(seed, count, h, w, style)
    return Scene(image, points, density_from_points(points, sigma, h, w), seed)


def make_dataset(seed: int, n: int, h: int = DEFAULT_SIZE, w: int = DEFAULT_SIZE,
                 count_range: tuple[int, int] = (10, 60), style: str = "uniform",
                 sigma: float = DEFAULT_SIGMA) -> list[Scene]:
    """``n`` scenes; scene ``i`` uses seed ``seed * 100_000 + i``."""
    rng = np.random.default_rng(seed)
    counts = rng.integers(count_range[0], count_range[1] + 1, size=n)
    scenes = []
    for i, cnt in enumerate(counts):
        st = style if style != "mixed" else ("uniform", "clustered")[i % 2]
        scenes.append(make_scene(seed * 100_000 + i, int(cnt), h, w, st, sigma))
    return scenes


def split_indices(n: int) -> dict[str, range]:
    """80/10/10 train/val/test split by scene index (i.e. by seed range)."""
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    return {
        "train": range(0, n_train),
        "val": range(n_train, n_train + n_val),
        "test": range(n_train + n_val, n),
    }


def nearest_neighbor_distances(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, float)
    d = np.hypot(*(points[:, None, :] - points[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)
