"""Image quality metrics on [0, 1] RGB images."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0
LUMA = np.array([0.2126, 0.7152, 0.0722])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE); identical images report ``PSNR_CAP``."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float64)
    return img if img.ndim == 2 else img[..., :3] @ LUMA


def ssim(a: np.ndarray, b: np.ndarray, *, sigma: float = 1.5, radius: int = 5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM on Rec.709 luma with an 11x11 Gaussian window (sigma 1.5) and reflect padding."""
    x = luma(a)
    y = luma(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def blur(img):
        return gaussian_filter(img, sigma, mode="reflect", truncate=radius / sigma)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
