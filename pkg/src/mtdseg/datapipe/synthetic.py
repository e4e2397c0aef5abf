"""Seeded synthetic land-cover-like dataset: geometric shapes on textured backgrounds.

Classes: 0 background, 1 disc, 2 box, 3 triangle. A few unannotated patches carry the
ignore value. Images are written under ``<root>/images`` and labels under ``<root>/labels``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .rasters import write_image, write_label

CLASS_NAMES = ("background", "disc", "box", "triangle")
# Mean colors overlap on purpose; shape carries part of the signal.
_CLASS_RGB = {1: (0.75, 0.35, 0.30), 2: (0.35, 0.45, 0.75), 3: (0.70, 0.65, 0.30)}
# shapes per image as a fraction of image size, and shape radius range
SHAPES_PER_PX = (1 / 12, 1 / 6)
RADIUS_PER_PX = (1 / 24, 1 / 7)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    x = np.linspace(0, cells, size, endpoint=False)
    i = x.astype(int)
    f = x - i
    top = coarse[i][:, i] * (1 - f)[None, :] + coarse[i][:, i + 1] * f[None, :]
    bot = coarse[i + 1][:, i] * (1 - f)[None, :] + coarse[i + 1][:, i + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _shape_mask(kind: int, yy, xx, cy, cx, r, rng) -> np.ndarray:
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 2:
        ry, rx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    # upward triangle with apex at (cy - r, cx)
    inside_y = (yy >= cy - r) & (yy <= cy + r)
    half = (yy - (cy - r)) / 2.0
    return inside_y & (np.abs(xx - cx) <= half)


def render_image(rng: np.random.Generator, size: int, ignore_value: int = 255):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.array([0.40, 0.50, 0.35]) + rng.normal(0, 0.05, 3)
    tex = _smooth_noise(rng, size, max(2, size // 32))[..., None] - 0.5
    image = base + 0.35 * tex * rng.uniform(0.5, 1.0, 3)
    label = np.zeros((size, size), dtype=np.int64)

    n_shapes = int(rng.integers(int(size * SHAPES_PER_PX[0]), int(size * SHAPES_PER_PX[1]) + 1))
    for _ in range(n_shapes):
        kind = int(rng.integers(1, 4))
        r = rng.uniform(size * RADIUS_PER_PX[0], size * RADIUS_PER_PX[1])
        cy, cx = rng.uniform(0, size, 2)
        mask = _shape_mask(kind, yy, xx, cy, cx, r, rng)
        color = np.array(_CLASS_RGB[kind]) + rng.normal(0, 0.08, 3)
        image[mask] = color + 0.15 * tex[mask]
        label[mask] = kind

    image = image * rng.uniform(0.8, 1.2) + rng.normal(0, 0.04, image.shape)
    if rng.random() < 0.3:
        h, w = rng.integers(size // 16, size // 6, 2)
        t, l = rng.integers(0, size - h), rng.integers(0, size - w)
        label[t:t + h, l:l + w] = ignore_value
    return (np.clip(image, 0, 1) * 255).round().astype(np.uint8), label


def generate_synthetic(root: str | Path, num_images: int = 209, image_size: int = 256,
                       seed: int = 0, ignore_value: int = 255) -> Path:
    """Write ``num_images`` image/label pairs. Defaults give 2,000 train tiles of 64 px at 6:2:2."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for k in range(num_images):
        rng = np.random.default_rng([seed, k])
        image, label = render_image(rng, image_size, ignore_value)
        write_image(root / "images" / f"syn_{k:04d}.png", image)
        write_label(root / "labels" / f"syn_{k:04d}.png", label)
    (root / "classes.txt").write_text("\n".join(CLASS_NAMES) + "\n")
    return root
