"""Procedural shape corpus: ten geometry classes rendered at desk scale.

Images are (3, size, size) float32 in [0, 1].  Two variants:

* ``color``  random saturated foreground on a noisy colored background
* ``binary`` white shape on black (a deliberately different domain for
  cross-domain generalization experiments)

The generator is fully seeded, so corpora are reproducible byte for byte.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from soi.imgproc import hsv_to_rgb

CLASS_NAMES = (
    "circle", "ring", "square", "diamond", "triangle",
    "star", "plus", "cross", "hstripes", "vstripes",
)


def _soft(mask_signed: np.ndarray, softness: float = 1.0) -> np.ndarray:
    """Signed distance (negative inside) -> soft coverage in [0,1]."""
    return np.clip(0.5 - mask_signed / softness, 0.0, 1.0)


def _shape_mask(class_id: int, size: int, rng) -> np.ndarray:
    cy = size / 2 + rng.uniform(-3, 3)
    cx = size / 2 + rng.uniform(-3, 3)
    r = rng.uniform(0.22, 0.38) * size
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    rad = np.sqrt(dx * dx + dy * dy)

    name = CLASS_NAMES[class_id]
    if name == "circle":
        return _soft(rad - r)
    if name == "ring":
        return _soft(np.abs(rad - r) - 0.28 * r)
    if name == "square":
        return _soft(np.maximum(np.abs(dx), np.abs(dy)) - r * 0.85)
    if name == "diamond":
        return _soft(np.abs(dx) + np.abs(dy) - r * 1.15)
    if name == "triangle":
        top = dy + r
        inside = np.maximum(np.abs(dx) - 0.62 * np.maximum(top, 0.0), dy - 0.75 * r)
        return _soft(np.maximum(inside, -top))
    if name == "star":
        theta = np.arctan2(dy, dx) + rng.uniform(0, 2 * np.pi / 5)
        spikes = r * (0.55 + 0.45 * np.cos(5 * theta))
        return _soft(rad - spikes)
    if name == "plus":
        w = 0.32 * r
        arm = np.minimum(np.abs(dx), np.abs(dy)) - w
        return _soft(np.maximum(arm, np.maximum(np.abs(dx), np.abs(dy)) - r))
    if name == "cross":
        w = 0.32 * r
        arm = np.minimum(np.abs(dx - dy), np.abs(dx + dy)) / np.sqrt(2) - w
        return _soft(np.maximum(arm, rad - 1.1 * r))
    if name == "hstripes":
        period = rng.uniform(5.0, 9.0)
        phase = rng.uniform(0, period)
        return _soft(np.abs(((yy + phase) % period) - period / 2) - period / 4 + 0.5)
    if name == "vstripes":
        period = rng.uniform(5.0, 9.0)
        phase = rng.uniform(0, period)
        return _soft(np.abs(((xx + phase) % period) - period / 2) - period / 4 + 0.5)
    raise ValueError(f"unknown class id {class_id}")


def _random_color(rng, saturated: bool) -> np.ndarray:
    h = rng.uniform(0, 1)
    s = rng.uniform(0.6, 1.0) if saturated else rng.uniform(0.0, 0.5)
    v = rng.uniform(0.7, 1.0) if saturated else rng.uniform(0.1, 0.6)
    return hsv_to_rgb(np.array([[[h]], [[s]], [[v]]], dtype=np.float64)).reshape(3)


def generate_image(class_id: int, size: int, variant: str, rng) -> np.ndarray:
    """Render one image of the given class."""
    mask = _shape_mask(class_id, size, rng)[None, :, :]
    if variant == "binary":
        img = np.repeat(mask, 3, axis=0)
    elif variant == "color":
        fg = _random_color(rng, saturated=True).reshape(3, 1, 1)
        bg = _random_color(rng, saturated=False).reshape(3, 1, 1)
        noise = rng.normal(0.0, 0.04, size=(3, size, size))
        img = bg * (1.0 - mask) + fg * mask + noise
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_corpus(n_images: int, seed: int, variant: str = "color",
                    size: int = 32) -> tuple[list[np.ndarray], list[int]]:
    """Round-robin over the ten classes; returns (images, labels)."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n_images):
        cls = i % len(CLASS_NAMES)
        images.append(generate_image(cls, size, variant, rng))
        labels.append(cls)
    return images, labels


def generate_labeled_dataset(n_per_class: int, seed: int, variant: str = "color",
                             size: int = 32):
    """LabeledDataset of fresh draws, n_per_class images per class."""
    from soi.fewshot import LabeledDataset

    rng = np.random.default_rng(seed)
    items = []
    for cls in range(len(CLASS_NAMES)):
        for _ in range(n_per_class):
            items.append((generate_image(cls, size, variant, rng), cls))
    return LabeledDataset(items)


def image_to_png_bytes(img: np.ndarray) -> bytes:
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, "PNG")
    return buf.getvalue()


def write_corpus_directory(directory, n_images: int, seed: int,
                           variant: str = "color", size: int = 32,
                           labeled_subdirs: bool = False) -> None:
    """Write the corpus as PNG files, optionally one subdirectory per class."""
    from pathlib import Path

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    images, labels = generate_corpus(n_images, seed, variant, size)
    for i, (img, cls) in enumerate(zip(images, labels)):
        if labeled_subdirs:
            sub = root / CLASS_NAMES[cls]
            sub.mkdir(exist_ok=True)
            path = sub / f"{i:05d}.png"
        else:
            path = root / f"{i:05d}_{CLASS_NAMES[cls]}.png"
        path.write_bytes(image_to_png_bytes(img))
