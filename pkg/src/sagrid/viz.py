"""Attention-grid export: raw grayscale maps and color-ramp overlays."""

from __future__ import annotations

import numpy as np

from .layers import resize_bilinear

__all__ = ["color_ramp", "grid_to_gray", "overlay_grid"]

# fixed ramp stops: low = blue, 0.75 = red, high = yellow
_RAMP_POS = np.array([0.0, 0.75, 1.0])
_RAMP_RGB = np.array([
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
])


def color_ramp(values: np.ndarray) -> np.ndarray:
    """Map values in [0,1] to RGB through the blue -> red -> yellow ramp."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    channels = [np.interp(v, _RAMP_POS, _RAMP_RGB[:, c]) for c in range(3)]
    return np.stack(channels)


def grid_to_gray(grid: np.ndarray) -> np.ndarray:
    """Raw grid [h x w] as a [3 x h x w] grayscale image, value = probability."""
    g = np.asarray(grid, dtype=np.float64)
    return np.repeat(np.clip(g, 0.0, 1.0)[None, :, :], 3, axis=0)


def overlay_grid(image: np.ndarray, grid: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the (max-normalized, upsampled) grid heat map over an image in [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[1:]
    g = np.asarray(grid, dtype=np.float64)
    g = g / g.max() if g.max() > 0 else g
    heat = color_ramp(resize_bilinear(g, h, w))
    return np.clip((1 - alpha) * img + alpha * heat, 0.0, 1.0)
