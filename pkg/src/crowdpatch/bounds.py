"""Certification arithmetic for randomized ablation.

If k of d pixels are kept uniformly at random and a patch covers n pixels,
the kept set misses the patch with probability C(d-n, k) / C(d, k); in that
event the ablated clean and patched images coincide. The smallest
probability of the worst case, every kept pixel landing inside the patch, is
C(n, k) / C(d, k). These numbers reach 1e-150 and below, so everything is
done with natural logarithms.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np

NEG_INF = float("-inf")


@dataclass(frozen=True)
class BoundQuery:
    d: int
    n: int
    k: int
    K: int = 1

    def __post_init__(self):
        if not 0 <= self.n <= self.d:
            raise ValueError(f"patch size n={self.n} must lie in [0, d={self.d}]")
        if not 0 <= self.k <= self.d:
            raise ValueError(f"retained count k={self.k} must lie in [0, d={self.d}]")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def log_choose(a: int, b: int) -> float:
    """ln C(a, b) as the sum of ln((a - b + i) / i) for i = 1..min(b, a - b).

    Returns -inf when b < 0 or b > a.
    """
    if a < 0:
        raise ValueError("a must be >= 0")
    if b < 0 or b > a:
        return NEG_INF
    b = min(b, a - b)
    if b == 0:
        return 0.0
    i = np.arange(1, b + 1, dtype=np.float64)
    return float(math.fsum(np.log1p((a - b) / i)))


def log_upper_bound(d: int, n: int, k: int) -> float:
    BoundQuery(d, n, k)
    return log_choose(d - n, k) - log_choose(d, k)


def log_lower_bound(d: int, n: int, k: int) -> float:
    BoundQuery(d, n, k)
    return log_choose(n, k) - log_choose(d, k)


def upper_bound(d: int, n: int, k: int) -> float:
    """Probability that k uniformly kept pixels all avoid an n-pixel patch."""
    return math.exp(log_upper_bound(d, n, k))


def lower_bound(d: int, n: int, k: int) -> float:
    """Probability that all k kept pixels fall inside the patch (0 when k > n)."""
    return math.exp(log_lower_bound(d, n, k))


def log10_lower_bound(d: int, n: int, k: int) -> float:
    return log_lower_bound(d, n, k) / math.log(10.0)


# ---------------------------------------------------------------- top-K overlap

def topk_indices(values, K: int) -> np.ndarray:
    """Flat indices of the K largest entries; ties go to the smaller index."""
    flat = np.asarray(values, float).ravel()
    if not 1 <= K <= flat.size:
        raise ValueError(f"K={K} must lie in [1, {flat.size}]")
    order = np.lexsort((np.arange(flat.size), -flat))
    return order[:K]


def topk_overlap(map_a, map_b, K: int) -> int:
    a = np.asarray(map_a, float)
    b = np.asarray(map_b, float)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    return len(np.intersect1d(topk_indices(a, K), topk_indices(b, K)))


@dataclass
class OverlapReport:
    histogram: np.ndarray  # histogram[i] = trials with overlap i, i in [0, K]
    miss_rate: float  # fraction of trials whose kept set avoided the patch
    miss_overlap_violations: int  # miss trials whose overlap was not K
    miss_ablation_mismatches: int = 0  # miss trials whose two ablated inputs differed


def empirical_overlap_bounds(predict: Callable, image, adv_image, patch_mask, k: int,
                             trials: int, K: int, null, seed=0) -> OverlapReport:
    """Monte-Carlo distribution of R = topk_overlap(f(ablate(x)), f(ablate(x_adv)), K).

    ``patch_mask`` is the (H, W) footprint where the two images may differ;
    ``predict`` maps an image to a density map.
    """
    from .defense import ablate, sample_retention

    if trials < 1:
        raise ValueError("trials must be >= 1")
    x = np.asarray(image, float)
    xa = np.asarray(adv_image, float)
    footprint = np.asarray(patch_mask, bool).ravel()
    h, w = x.shape[-2:]
    rng = np.random.default_rng(seed)
    hist = np.zeros(K + 1, dtype=np.int64)
    misses = violations = mismatches = 0
    for _ in range(trials):
        keep = sample_retention(h * w, k, rng)
        xk, xak = ablate(x, keep, null), ablate(xa, keep, null)
        r = topk_overlap(predict(xk), predict(xak), K)
        hist[r] += 1
        if not footprint[keep.indices].any():
            misses += 1
            violations += r != K
            mismatches += xk.tobytes() != xak.tobytes()
    return OverlapReport(hist, misses / trials, violations, mismatches)


# ---------------------------------------------------------------- bound tables

REFERENCE_SIDES = (20, 40, 81, 163)
REFERENCE_K = 45
REFERENCE_D = 716_800


def bound_rows(d: int, k: int, ns: Iterable[int]) -> list[dict]:
    return [{"n": n, "k": k, "d": d, "upper": upper_bound(d, n, k),
             "log10_lower": log10_lower_bound(d, n, k)} for n in ns]


def write_bound_csv(path_or_file, rows: list[dict]) -> None:
    fields = ["n", "k", "d", "upper", "log10_lower"]
    if hasattr(path_or_file, "write"):
        _write_rows(path_or_file, fields, rows)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write_rows(fh, fields, rows)


def _write_rows(fh, fields, rows):
    w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def fit_d(targets: dict[int, float], k: int, lo: int, hi: int,
          step: Optional[int] = None) -> tuple[int, float]:
    """Integer d in [lo, hi] minimizing the worst relative error of upper_bound
    against ``targets`` (patch size n -> probability).

    A coarse scan with ``step`` is refined by a unit-step scan around the best
    coarse point. Returns (d, worst relative error).
    """
    def worst(d):
        return max(abs(upper_bound(d, n, k) - t) / t for n, t in targets.items())

    step = step or max(1, (hi - lo) // 2000)
    coarse = min(range(lo, hi + 1, step), key=worst)
    fine = min(range(max(lo, coarse - step), min(hi, coarse + step) + 1), key=worst)
    return fine, worst(fine)
