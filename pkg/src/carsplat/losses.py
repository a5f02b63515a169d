"""Image-space loss terms of the reconstruction objective."""

from __future__ import annotations

import functools

import numpy as np
import torch
import torch.nn.functional as F

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@functools.lru_cache(maxsize=8)
def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean SSIM of two ``(H, W, C)`` images with a zero-padded Gaussian window."""
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if window % 2 != 1:
        raise ValueError("SSIM window must be odd")
    c = a.shape[-1]
    g = torch.as_tensor(_gaussian_1d(window, sigma), dtype=a.dtype)
    kv = g.reshape(1, 1, window, 1).expand(5 * c, 1, window, 1)
    kh = g.reshape(1, 1, 1, window).expand(5 * c, 1, 1, window)
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    # the Gaussian window is separable: blur all five moment images in one grouped pass
    stack = torch.cat([x, y, x * x, y * y, x * y])[None]
    pad = window // 2
    blurred = F.conv2d(F.conv2d(stack, kv, padding=(pad, 0), groups=5 * c), kh,
                       padding=(0, pad), groups=5 * c)[0]
    mx, my, exx, eyy, exy = blurred.split(c)
    sxx = exx - mx * mx
    syy = eyy - my * my
    sxy = exy - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def loss_rgb(rendered, target, window: int = 11) -> torch.Tensor:
    """L1 plus DSSIM (``1 - SSIM``)."""
    rendered, target = _t(rendered), _t(target)
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return (rendered - target).abs().mean() + (1.0 - ssim(rendered, target, window))


def loss_opacity(acc_opacity, mask) -> torch.Tensor:
    """Accumulated opacity summed over pixels outside the object mask."""
    acc_opacity, mask = _t(acc_opacity), _t(mask).to(_t(acc_opacity).dtype)
    if acc_opacity.shape != mask.shape:
        raise ValueError("opacity map and mask dimensions differ")
    return ((1.0 - mask) * acc_opacity).sum()


def loss_normal(normal, target_normal, mask) -> torch.Tensor:
    """Sum over masked pixels of ``1 - <n, n_target>``; zero when no target is given."""
    normal = _t(normal)
    if target_normal is None:
        return torch.zeros((), dtype=normal.dtype)
    target_normal, mask = _t(target_normal).to(normal.dtype), _t(mask).to(normal.dtype)
    if normal.shape != target_normal.shape or normal.shape[:2] != mask.shape:
        raise ValueError("normal map and mask dimensions differ")
    return (mask * (1.0 - (normal * target_normal).sum(-1))).sum()


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)
