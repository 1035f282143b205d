"""PSNR and single-scale SSIM on [0,1] images.

Both accept (H,W) / (H,W,C) arrays or rank-4 single-sample Tensors.
PSNR of identical images is reported as the 100 dB cap so averages stay
finite.  SSIM uses the standard 11x11 Gaussian window (sigma 1.5),
k1=0.01, k2=0.03, dynamic range 1, per-channel then averaged, valid
windows only.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate

from .tensor import ShapeError, Tensor

PSNR_CAP = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _to_chw(image) -> np.ndarray:
    if isinstance(image, Tensor):
        if image.shape[0] != 1:
            raise ShapeError("metrics expect a single image (batch 1)")
        return image.data[0].astype(np.float64)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim == 3:
        return arr.transpose(2, 0, 1)
    raise ShapeError(f"expected (H,W) or (H,W,C) image, got shape {arr.shape}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    xa, xb = _to_chw(a), _to_chw(b)
    if xa.shape != xb.shape:
        raise ShapeError(f"psnr: shapes differ {xa.shape} vs {xb.shape}")
    mse = np.mean((xa - xb) ** 2)
    if mse == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b) -> float:
    """Structural similarity over valid 11x11 windows, averaged over channels."""
    xa, xb = _to_chw(a), _to_chw(b)
    if xa.shape != xb.shape:
        raise ShapeError(f"ssim: shapes differ {xa.shape} vs {xb.shape}")
    C, H, W = xa.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ShapeError(f"ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, "
                         f"got {H}x{W}")
    kernel = _gaussian_window()
    pad = SSIM_WINDOW // 2
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def local(x):
        return correlate(x, kernel, mode="constant")[pad:H - pad, pad:W - pad]

    vals = []
    for c in range(C):
        x, y = xa[c], xb[c]
        mx, my = local(x), local(y)
        sxx = local(x * x) - mx * mx
        syy = local(y * y) - my * my
        sxy = local(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def ssim_reference(a, b) -> float:
    """Naive per-window oracle for ssim (double loop); test use only."""
    xa, xb = _to_chw(a), _to_chw(b)
    C, H, W = xa.shape
    kernel = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    n = SSIM_WINDOW
    vals = []
    for c in range(C):
        acc = []
        for i in range(H - n + 1):
            for j in range(W - n + 1):
                wx = xa[c, i:i + n, j:j + n]
                wy = xb[c, i:i + n, j:j + n]
                mx = (kernel * wx).sum()
                my = (kernel * wy).sum()
                sxx = (kernel * wx * wx).sum() - mx * mx
                syy = (kernel * wy * wy).sum() - my * my
                sxy = (kernel * wx * wy).sum() - mx * my
                acc.append(((2 * mx * my + c1) * (2 * sxy + c2)) /
                           ((mx * mx + my * my + c1) * (sxx + syy + c2)))
        vals.append(np.mean(acc))
    return float(np.mean(vals))
