"""Stochastic two-view augmentation: one pooled image -> (x_m, x_n).

The per-pair seed is split into two independent counter-based streams, one
per view, so the two views draw independently yet the whole pair is
reproducible from (image, policy, seed).

Pipeline order per view: random resized crop -> horizontal flip -> color
jitter -> random grayscale -> Gaussian blur.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from soi.errors import DomainError, ShapeError
from soi.imgproc import bilinear_resize, gaussian_blur, grayscale, hsv_to_rgb, rgb_to_hsv


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_area_range: tuple = (0.2, 1.0)
    flip_probability: float = 0.5
    jitter_strength: float = 0.5
    grayscale_probability: float = 0.2
    blur_probability: float = 0.5
    blur_sigma_range: tuple = (0.1, 2.0)
    output_size: tuple = (32, 32)

    def __post_init__(self):
        lo, hi = self.crop_area_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_area_range must satisfy 0 < lo <= hi <= 1, got {self.crop_area_range}")
        for name in ("flip_probability", "grayscale_probability", "blur_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be non-negative")
        if min(self.blur_sigma_range) <= 0:
            raise ValueError("blur sigmas must be positive")


@dataclass(frozen=True)
class ViewPair:
    x_m: np.ndarray
    x_n: np.ndarray


def random_resized_crop(image: np.ndarray, area_range, out_size, rng) -> np.ndarray:
    """Crop a random area fraction (aspect preserved) and resize bilinearly."""
    _, h, w = image.shape
    out_h, out_w = out_size
    if h < out_h or w < out_w:
        raise ShapeError(f"image {h}x{w} smaller than minimum croppable size {out_h}x{out_w}")
    frac = np.sqrt(rng.uniform(area_range[0], area_range[1]))
    ch = max(1, int(round(h * frac)))
    cw = max(1, int(round(w * frac)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[:, top : top + ch, left : left + cw]
    return bilinear_resize(crop, out_h, out_w)


def color_distortion(image: np.ndarray, strength: float, rng) -> np.ndarray:
    """Brightness, contrast, saturation scaling then hue rotation; clamped.

    Factor ranges scale with strength: x0.8*s for the three scalings and
    +-0.2*s turns of the color wheel for hue.  All four draws happen even
    when strength is 0 (identity factors) to keep the stream stable.
    """
    if strength < 0:
        raise DomainError("strength must be non-negative")
    span = 0.8 * strength
    b = rng.uniform(max(0.0, 1.0 - span), 1.0 + span)
    c = rng.uniform(max(0.0, 1.0 - span), 1.0 + span)
    s = rng.uniform(max(0.0, 1.0 - span), 1.0 + span)
    hue = rng.uniform(-0.2 * strength, 0.2 * strength)

    out = image * b
    luma_mean = grayscale(out)[0].mean()
    out = (out - luma_mean) * c + luma_mean
    gray = grayscale(out)
    out = gray + (out - gray) * s
    if hue != 0.0:
        hsv = rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[0] = (hsv[0] + hue) % 1.0
        out = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def _one_view(image: np.ndarray, policy: AugmentationPolicy, rng) -> np.ndarray:
    view = random_resized_crop(image, policy.crop_area_range, policy.output_size, rng)
    if rng.random() < policy.flip_probability:
        view = view[:, :, ::-1]
    view = color_distortion(view, policy.jitter_strength, rng)
    if rng.random() < policy.grayscale_probability:
        view = grayscale(view)
    if rng.random() < policy.blur_probability:
        sigma = rng.uniform(*policy.blur_sigma_range)
        view = gaussian_blur(view, sigma)
    return np.clip(view, 0.0, 1.0).astype(np.float32)


def augment_pair(image: np.ndarray, policy: AugmentationPolicy, rng_seed) -> ViewPair:
    """Two independently augmented views of one image, reproducible by seed."""
    if image.ndim != 3:
        raise ShapeError("augment_pair expects a (C,H,W) image")
    streams = np.random.SeedSequence(rng_seed).spawn(2)
    x_m = _one_view(image, policy, np.random.default_rng(streams[0]))
    x_n = _one_view(image, policy, np.random.default_rng(streams[1]))
    return ViewPair(x_m=x_m, x_n=x_n)
