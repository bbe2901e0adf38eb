"""Fidelity metrics on the [0, 1] float scale."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import Image, check_same_shape

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def mse(a: Image, b: Image) -> float:
    check_same_shape(a, b)
    d = a.data - b.data
    return float(np.mean(d * d))


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; ``inf`` for identical images.

    For colour images the MSE runs over every sample of every channel.
    """
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _ssim_channel(x: np.ndarray, y: np.ndarray, win: int) -> float:
    wx = sliding_window_view(x, (win, win))
    wy = sliding_window_view(y, (win, win))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a: Image, b: Image, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all 8x8 uniform windows at stride 1, averaged over channels.

    Window statistics use population (1/n) moments.
    """
    check_same_shape(a, b)
    if a.height < window or a.width < window:
        raise ValueError(f"image {a.width}x{a.height} smaller than {window}x{window} window")
    if a == b:
        return 1.0
    vals = [
        _ssim_channel(a.data[:, :, c], b.data[:, :, c], window) for c in range(a.channels)
    ]
    return float(np.mean(vals))
