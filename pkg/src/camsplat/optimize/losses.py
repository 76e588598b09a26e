"""Photometric loss: mean absolute error blended with D-SSIM."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from camsplat import autodiff as ad
from camsplat.autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


@lru_cache(maxsize=4)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _as_hwc(x) -> Tensor:
    x = ad.as_tensor(x)
    return x.reshape(*x.shape, 1) if x.ndim == 2 else x


def ssim_map(a, b) -> Tensor:
    """Per-position SSIM over valid window placements, per channel."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ad.ShapeError(f"ssim: image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = gaussian_window()
    mu_a, mu_b = ad.filter_valid(a, k), ad.filter_valid(b, k)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = ad.filter_valid(a * a, k) - mu_aa
    var_b = ad.filter_valid(b * b, k) - mu_bb
    cov = ad.filter_valid(a * b, k) - mu_ab
    num = (2.0 * mu_ab + C1) * (2.0 * cov + C2)
    den = (mu_aa + mu_bb + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b) -> Tensor:
    return ssim_map(a, b).mean()


def dssim(a, b) -> Tensor:
    return (1.0 - ssim(a, b)) * 0.5


def l1(a, b) -> Tensor:
    return ad.tabs(ad.as_tensor(a) - b).mean()


def photometric_loss(image, target, lam: float = 0.2) -> Tensor:
    image, target = ad.as_tensor(image), ad.as_tensor(target)
    if image.shape != target.shape:
        raise ad.ShapeError(f"photometric_loss: shape mismatch {image.shape} vs {target.shape}")
    if lam == 0.0:
        return l1(image, target)
    return (1.0 - lam) * l1(image, target) + lam * dssim(image, target)
