from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation


@dataclass(frozen=True)
class SegmentationSample:
    """One image tile: float image in [0, 1] of shape (H, W, 3) and an (H, W) class-id map."""

    image: np.ndarray
    label: np.ndarray
    ignore_value: int = 255

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float32)
        label = np.asarray(self.label, dtype=np.int64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ContractViolation(f"image must be HxWx3, got {image.shape}")
        if label.shape != image.shape[:2]:
            raise ContractViolation(f"label {label.shape} does not match image {image.shape[:2]}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "label", label)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.label != self.ignore_value

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape

    def check_classes(self, num_classes: int) -> None:
        bad = self.valid_mask & ((self.label < 0) | (self.label >= num_classes))
        if bad.any():
            raise ContractViolation(f"label ids {np.unique(self.label[bad])[:5]} >= {num_classes}")

    @classmethod
    def from_uint8(cls, image: np.ndarray, label: np.ndarray, ignore_value: int = 255):
        return cls(np.asarray(image, dtype=np.float32) / 255.0, label, ignore_value)
