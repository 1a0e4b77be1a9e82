"""Retrieval and image-quality metrics: average precision and SSIM.

Average precision follows the Oxford buildings protocol: `junk` images are
removed from the ranking (neither right nor wrong), relevant = good + ok,
and relevant images that never appear in the ranking contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError
from .imagecore import to_grayscale, validate_image


@dataclass
class RelevanceJudgments:
    """Per-query relevance sets. good/ok/junk must be pairwise disjoint."""

    good: set = field(default_factory=set)
    ok: set = field(default_factory=set)
    junk: set = field(default_factory=set)

    def __post_init__(self):
        self.good, self.ok, self.junk = set(self.good), set(self.ok), set(self.junk)
        if self.good & self.ok or self.good & self.junk or self.ok & self.junk:
            raise DataError("good/ok/junk sets must be pairwise disjoint")

    @property
    def relevant(self) -> set:
        return self.good | self.ok


def average_precision(ranking, judgments: RelevanceJudgments) -> float:
    """AP of a ranked id list: mean of precision at each relevant item's rank.

    `ranking` is an ordered sequence of image ids (best first); entries in the
    junk set are dropped before scoring. Raises DataError when the query has no
    relevant images, so callers can exclude it from the mean.
    """
    relevant = judgments.relevant
    if not relevant:
        raise DataError("query has no relevant (good or ok) images")
    seen = set()
    hits = 0
    rank = 0
    precision_sum = 0.0
    for image_id in ranking:
        if image_id in judgments.junk:
            continue
        if image_id in seen:
            raise DataError(f"duplicate id in ranking: {image_id!r}")
        seen.add(image_id)
        rank += 1
        if image_id in relevant:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / len(relevant)


def mean_average_precision(aps) -> float:
    """Mean AP scaled to percent (78.39 style). Input APs are in [0, 1]."""
    aps = list(aps)
    if not aps:
        raise DataError("mean_average_precision needs at least one query")
    return 100.0 * float(np.mean(aps))


# SSIM constants per the standard single-channel definition on L = 1 data.
_SSIM_C1 = (0.01 * 1.0) ** 2
_SSIM_C2 = (0.03 * 1.0) ** 2
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # separable filtering; crop to valid windows afterwards so the boundary
    # extension mode never influences the result
    r = len(kernel) // 2
    out = correlate1d(img, kernel, axis=0, mode="nearest")
    out = correlate1d(out, kernel, axis=1, mode="nearest")
    return out[r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM between two images (computed on the grayscale conversion).

    11x11 Gaussian window with sigma 1.5, C1 = (0.01 L)^2, C2 = (0.03 L)^2,
    L = 1; averaged over all fully-valid window positions.
    """
    a = validate_image(a, "a")
    b = validate_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = to_grayscale(a)
        b = to_grayscale(b)
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"image smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")

    kernel = _gaussian_kernel_1d(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a * mu_a
    var_b = _windowed_mean(b * b, kernel) - mu_b * mu_b
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(np.mean(num / den))
