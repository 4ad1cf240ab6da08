"""Heatmap agreement metrics and the rank-sum significance test.

All metrics compare two maps of identical shape at a common comparison
resolution.  Spearman correlates average ranks, DSC binarizes each map at its
own percentile before set overlap, and SSIM supports both the windowed
(Gaussian 11x11, sigma 1.5) and single-window global variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from math import comb, erf, sqrt

import numpy as np

from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class MetricConfig:
    dsc_threshold_percentile: float = 50.0
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_mode: str = "windowed"  # windowed | global
    comparison_resolution: int = 224

    def __post_init__(self):
        if not 0.0 <= self.dsc_threshold_percentile <= 100.0:
            raise ValueError(f"dsc_threshold_percentile {self.dsc_threshold_percentile} not in [0, 100]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be a positive odd integer, got {self.ssim_window}")
        if self.ssim_mode not in ("windowed", "global"):
            raise ValueError(f"ssim_mode must be 'windowed' or 'global', got {self.ssim_mode!r}")
        if self.comparison_resolution < 1:
            raise ValueError("comparison_resolution must be positive")


def _check_same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their occupied positions."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.size, dtype=np.float64)
    sorted_vals = flat[order]
    # group boundaries of equal runs in the sorted order
    boundaries = np.flatnonzero(np.concatenate(([True], sorted_vals[1:] != sorted_vals[:-1], [True])))
    for start, stop in zip(boundaries[:-1], boundaries[1:]):
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    _check_same_shape("spearman", a, b)
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = sqrt(float((ra * ra).sum()) * float((rb * rb).sum()))
    if denom == 0.0:
        raise NumericError("spearman: an input is constant, correlation undefined")
    return float((ra * rb).sum()) / denom


def dsc(a: np.ndarray, b: np.ndarray, config: MetricConfig | None = None) -> float:
    """Dice coefficient after per-map percentile binarization (strictly above)."""
    config = config or MetricConfig()
    _check_same_shape("dsc", a, b)
    ma = a > np.percentile(a, config.dsc_threshold_percentile)
    mb = b > np.percentile(b, config.dsc_threshold_percentile)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _windowed_stats(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local means via sliding windows."""
    size = kernel.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.einsum("ijkl,kl->ij", windows, kernel)


def ssim(a: np.ndarray, b: np.ndarray, config: MetricConfig | None = None) -> float:
    """Structural similarity on a dynamic range of 1.

    Windowed mode averages the per-window index over all valid (fully inside)
    positions of a Gaussian-weighted window; global mode treats the whole map
    as a single uniform window.  Covariances are population style (weights sum
    to one, no bias correction).
    """
    config = config or MetricConfig()
    _check_same_shape("ssim", a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1, c2 = config.ssim_c1, config.ssim_c2

    if config.ssim_mode == "global":
        mu_a, mu_b = a.mean(), b.mean()
        var_a = ((a - mu_a) ** 2).mean()
        var_b = ((b - mu_b) ** 2).mean()
        cov = ((a - mu_a) * (b - mu_b)).mean()
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        return float(num / den)

    size = config.ssim_window
    if a.shape[0] < size or a.shape[1] < size:
        raise ShapeError(f"ssim: window {size} exceeds map {a.shape[0]}x{a.shape[1]}")
    kernel = _gaussian_kernel(size, config.ssim_sigma)
    mu_a = _windowed_stats(a, kernel)
    mu_b = _windowed_stats(b, kernel)
    mu_aa = _windowed_stats(a * a, kernel)
    mu_bb = _windowed_stats(b * b, kernel)
    mu_ab = _windowed_stats(a * b, kernel)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _rank_sum_exact(a: np.ndarray, b: np.ndarray) -> float:
    """P(rank sum of a sample >= observed) by enumerating assignments.

    Handles ties exactly: every subset of positions of size len(a) in the
    pooled ranking is equally likely under the null.
    """
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    n_a = len(a)
    observed = ranks[:n_a].sum()
    total = comb(len(pooled), n_a)
    hits = 0
    # tolerance guards float rank arithmetic when comparing sums
    eps = 1e-9
    for idx in combinations(range(len(pooled)), n_a):
        if ranks[list(idx)].sum() >= observed - eps:
            hits += 1
    return hits / total


def _rank_sum_normal(a: np.ndarray, b: np.ndarray) -> float:
    """Tie-corrected normal approximation with continuity correction."""
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    n_a, n_b = len(a), len(b)
    n = n_a + n_b
    r_a = ranks[:n_a].sum()
    u_a = r_a - n_a * (n_a + 1) / 2.0
    mu = n_a * n_b / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float((counts.astype(np.float64) ** 3 - counts).sum())
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        return 0.5
    z = (u_a - mu - 0.5) / sqrt(var)
    return 0.5 * (1.0 - erf(z / sqrt(2.0)))


def wilcoxon_rank_sum_one_tailed(a, b, method: str = "auto") -> float:
    """One-tailed rank-sum p-value for 'a stochastically greater than b'.

    method='auto' enumerates exactly when the smaller sample has at most 8
    observations and falls back to the tie-corrected normal approximation
    (with continuity correction) otherwise.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("wilcoxon_rank_sum_one_tailed: both samples must be non-empty")
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    if method == "exact" or (method == "auto" and min(a.size, b.size) <= 8):
        return _rank_sum_exact(a, b)
    return _rank_sum_normal(a, b)
