"""Raster I/O: 8-bit RGB images and single-channel class-id label maps."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import IngestionError

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
# Potsdam-sized rasters are ~100 MB decoded; keep only a handful resident per worker.
_CACHE_SIZE = 8

Image.MAX_IMAGE_PIXELS = None


def find_label(label_dir: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTENSIONS:
        p = label_dir / f"{stem}{ext}"
        if p.is_file():
            return p
    return None


def read_size(path: Path) -> tuple[int, int, int]:
    """(height, width, channels) from the file header."""
    try:
        with Image.open(path) as im:
            w, h = im.size
            return h, w, len(im.getbands())
    except OSError as e:
        raise IngestionError(f"cannot read raster {path}: {e}") from None


@lru_cache(maxsize=_CACHE_SIZE)
def read_image(path: str) -> np.ndarray:
    """uint8 array of shape (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as e:
        raise IngestionError(f"cannot read image {path}: {e}") from None


@lru_cache(maxsize=_CACHE_SIZE)
def read_label(path: str) -> np.ndarray:
    """Integer array of shape (H, W)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as e:
        raise IngestionError(f"cannot read label {path}: {e}") from None
    if arr.ndim != 2:
        raise IngestionError(f"label raster {path} is not single-channel")
    return arr


def write_image(path: Path, image: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def write_label(path: Path, label: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path)
