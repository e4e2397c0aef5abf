"""Weak and strong augmentation policies.

Geometric ops move image and label together (bilinear for pixels, nearest for
class ids). Photometric ops touch the image only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigurationError, ContractViolation
from .sample import SegmentationSample


@dataclass(frozen=True)
class AugmentationSpec:
    crop_size: int
    resize_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5
    brightness: float = 0.5
    contrast: float = 0.5
    saturation: float = 0.5
    hue: float = 0.25
    jitter_prob: float = 0.8
    cutmix_prob: float = 0.5
    cutmix_area_range: tuple[float, float] = (0.2, 0.5)
    cutmix_aspect_range: tuple[float, float] = (0.5, 2.0)

    def validate(self, patch_size: int | None = None) -> "AugmentationSpec":
        for name in ("hflip_prob", "jitter_prob", "cutmix_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.crop_size <= 0:
            raise ConfigurationError("crop_size must be positive")
        if patch_size and self.crop_size % patch_size:
            raise ConfigurationError(
                f"crop_size {self.crop_size} is not divisible by patch size {patch_size}")
        lo, hi = self.resize_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"invalid resize_range {self.resize_range}")
        a_lo, a_hi = self.cutmix_area_range
        if not 0 <= a_lo <= a_hi <= 1:
            raise ConfigurationError(f"invalid cutmix_area_range {self.cutmix_area_range}")
        r_lo, r_hi = self.cutmix_aspect_range
        if not 0 < r_lo <= r_hi:
            raise ConfigurationError(f"invalid cutmix_aspect_range {self.cutmix_aspect_range}")
        if not 0 <= self.hue <= 0.5:
            raise ConfigurationError("hue jitter must lie in [0, 0.5]")
        return self


@dataclass(frozen=True)
class CutMixBox:
    """Half-open rectangle [top, top+height) x [left, left+width)."""

    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def check(self, h: int, w: int) -> None:
        if (self.top < 0 or self.left < 0 or self.height < 0 or self.width < 0
                or self.top + self.height > h or self.left + self.width > w):
            raise ContractViolation(f"{self} lies outside a {h}x{w} extent")

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def resize(image: np.ndarray, label: np.ndarray, size: tuple[int, int]):
    """Bilinear resize of an (H, W, 3) image and nearest resize of its (H, W) label."""
    if tuple(size) == image.shape[:2]:
        return image, label
    img = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    img = F.interpolate(img, size=size, mode="bilinear", align_corners=False)
    lbl = torch.from_numpy(np.ascontiguousarray(label))[None, None].double()
    lbl = F.interpolate(lbl, size=size, mode="nearest-exact")
    return img[0].permute(1, 2, 0).numpy(), lbl[0, 0].long().numpy()


def weak_augment(sample: SegmentationSample, rng: np.random.Generator,
                 spec: AugmentationSpec) -> SegmentationSample:
    """Random rescale, pad-to-crop, random crop and horizontal flip."""
    h, w = sample.shape
    crop = spec.crop_size
    lo, hi = spec.resize_range
    if crop > round(min(h, w) * hi):
        raise ConfigurationError(
            f"crop_size {crop} exceeds the largest reachable resize of a {h}x{w} tile")
    scale = rng.uniform(lo, hi)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    image, label = resize(sample.image, sample.label, (nh, nw))

    ph, pw = max(crop - nh, 0), max(crop - nw, 0)
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=sample.ignore_value)
    top = int(rng.integers(0, image.shape[0] - crop + 1))
    left = int(rng.integers(0, image.shape[1] - crop + 1))
    image = image[top:top + crop, left:left + crop]
    label = label[top:top + crop, left:left + crop]
    if rng.random() < spec.hflip_prob:
        image, label = image[:, ::-1], label[:, ::-1]
    return SegmentationSample(np.ascontiguousarray(image), np.ascontiguousarray(label),
                              sample.ignore_value)


def hflip(sample: SegmentationSample) -> SegmentationSample:
    return SegmentationSample(sample.image[:, ::-1].copy(), sample.label[:, ::-1].copy(),
                              sample.ignore_value)


def _grayscale(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc, minc = rgb.max(-1), rgb.min(-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1), 0.0)
    return np.stack([h, s, maxc], -1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    choices = [np.stack(c, -1) for c in
               ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros_like(hsv)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


def color_jitter(image: np.ndarray, rng: np.random.Generator,
                 spec: AugmentationSpec) -> np.ndarray:
    """Brightness/contrast/saturation/hue jitter in random order, applied with ``jitter_prob``.

    Ops whose strength is zero are skipped, so a zero-strength spec is an exact identity.
    """
    apply = rng.random() < spec.jitter_prob
    order = rng.permutation(4)
    factors = [
        rng.uniform(max(0.0, 1 - spec.brightness), 1 + spec.brightness),
        rng.uniform(max(0.0, 1 - spec.contrast), 1 + spec.contrast),
        rng.uniform(max(0.0, 1 - spec.saturation), 1 + spec.saturation),
        rng.uniform(-spec.hue, spec.hue),
    ]
    if not apply:
        return image
    strengths = (spec.brightness, spec.contrast, spec.saturation, spec.hue)
    out = image.astype(np.float32, copy=True)
    for k in order:
        if strengths[k] == 0:
            continue
        f = factors[k]
        if k == 0:
            out = out * f
        elif k == 1:
            out = f * out + (1 - f) * _grayscale(out).mean()
        elif k == 2:
            out = f * out + (1 - f) * _grayscale(out)[..., None]
        else:
            hsv = rgb_to_hsv(out)
            hsv[..., 0] = (hsv[..., 0] + f) % 1.0
            out = hsv_to_rgb(hsv)
        out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out


def sample_cutmix_box(h: int, w: int, rng: np.random.Generator,
                      spec: AugmentationSpec) -> CutMixBox:
    area = rng.uniform(*spec.cutmix_area_range) * h * w
    aspect = rng.uniform(*spec.cutmix_aspect_range)  # height / width
    bh = min(h, max(1, round(math.sqrt(area * aspect))))
    bw = min(w, max(1, round(math.sqrt(area / aspect))))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return CutMixBox(top, left, bh, bw)


def cutmix(recipient: SegmentationSample, donor: SegmentationSample,
           box: CutMixBox) -> SegmentationSample:
    if recipient.shape != donor.shape:
        raise ContractViolation(f"cutmix shape mismatch {recipient.shape} vs {donor.shape}")
    box.check(*recipient.shape)
    image, label = recipient.image.copy(), recipient.label.copy()
    rs, cs = box.slices()
    image[rs, cs] = donor.image[rs, cs]
    label[rs, cs] = donor.label[rs, cs]
    return SegmentationSample(image, label, recipient.ignore_value)


def strong_view(sample: SegmentationSample, rng: np.random.Generator,
                spec: AugmentationSpec) -> tuple[np.ndarray, CutMixBox | None]:
    """Jittered image plus the CutMix box to apply later (None if CutMix is not drawn)."""
    image = color_jitter(sample.image, rng, spec)
    box = None
    if rng.random() < spec.cutmix_prob:
        box = sample_cutmix_box(*sample.shape, rng, spec)
    return image, box


def strong_augment(sample: SegmentationSample, donor: SegmentationSample,
                   rng: np.random.Generator, spec: AugmentationSpec) -> SegmentationSample:
    if sample.shape != donor.shape:
        raise ContractViolation(f"strong_augment shape mismatch {sample.shape} vs {donor.shape}")
    image, box = strong_view(sample, rng, spec)
    out = SegmentationSample(image, sample.label, sample.ignore_value)
    return out if box is None else cutmix(out, donor, box)


def box_mask(boxes, h: int, w: int) -> torch.Tensor:
    """(B, H, W) bool mask, True inside each sample's box. ``boxes`` holds CutMixBox or None."""
    mask = torch.zeros(len(boxes), h, w, dtype=torch.bool)
    for i, box in enumerate(boxes):
        if box is not None:
            box.check(h, w)
            rs, cs = box.slices()
            mask[i, rs, cs] = True
    return mask


def cutmix_tensors(recipient: torch.Tensor, donor: torch.Tensor,
                   mask: torch.Tensor) -> torch.Tensor:
    """Batched CutMix: take ``donor`` where ``mask`` (B, H, W) is set.

    Works for images (B, C, H, W) and per-pixel maps (B, H, W).
    """
    if recipient.shape != donor.shape:
        raise ContractViolation("cutmix recipient and donor differ in shape")
    m = mask if recipient.dim() == 3 else mask[:, None]
    return torch.where(m, donor, recipient)
