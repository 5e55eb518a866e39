"""Low-level image array helpers shared by augmentation, ingestion and analysis.

Images are numpy float arrays shaped (C, H, W) with values in [0, 1].
"""

from __future__ import annotations

import numpy as np


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C,H,W) with bilinear interpolation, half-pixel centers."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]

    top = img[:, y0[:, None], x0[None, :]] * (1 - wx) + img[:, y0[:, None], x1[None, :]] * wx
    bot = img[:, y1[:, None], x0[None, :]] * (1 - wx) + img[:, y1[:, None], x1[None, :]] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype, copy=False)


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """(3,H,W) RGB in [0,1] -> HSV with h in [0,1), s,v in [0,1]."""
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1.0), 0.0)

    safe = np.where(spread > 0, spread, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    """(3,H,W) HSV (h in [0,1)) -> RGB in [0,1]."""
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.intp) % 6

    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, replicated to all three channels."""
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.stack([luma, luma, luma])


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian taps at radius ceil(3*sigma), normalized to sum 1."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def reflect_pad_1d(img: np.ndarray, radius: int, axis: int) -> np.ndarray:
    pad = [(0, 0)] * img.ndim
    pad[axis] = (radius, radius)
    return np.pad(img, pad, mode="reflect")


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of (C,H,W) with reflect padding."""
    taps = gaussian_kernel_1d(sigma).astype(img.dtype)
    radius = (len(taps) - 1) // 2

    padded = reflect_pad_1d(img, radius, axis=1)
    rows = np.zeros_like(img)
    for t, k in enumerate(taps):
        rows += k * padded[:, t : t + img.shape[1], :]

    padded = reflect_pad_1d(rows, radius, axis=2)
    out = np.zeros_like(img)
    for t, k in enumerate(taps):
        out += k * padded[:, :, t : t + img.shape[2]]
    return out
