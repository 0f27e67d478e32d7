"""Image quality metrics: PSNR and single-scale SSIM (unit dynamic range)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import InvalidParameterError, check_image, check_same_shape

PSNR_CAP = 99.0


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)``; identical images report ``PSNR_CAP``."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation over axes 0 and 1, keeping only full windows
    x = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(x, len(g), axis=1) @ g


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all window positions that fit inside the image, averaged over channels."""
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise InvalidParameterError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the {window}x{window} window")
    g = _gaussian_1d(window, sigma)
    c1, c2 = k1**2, k2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(np.mean(s.mean(axis=(0, 1))))


def evaluate(a, b) -> MetricReport:
    return MetricReport(psnr(a, b), ssim(a, b))
