"""Frozen teacher encoders that map image batches to patch-token feature maps.

Teachers receive pixels in [0, 1] and apply their own pretraining normalization.
Inputs whose size is not a multiple of the teacher patch are resized (bilinear) to the
nearest multiple; callers then align the token grid to the student's.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation, IntegrityError, WeightsError

TEACHER_KINDS = ("dinov2", "clip", "sam", "mock")
WEIGHTS_CACHE_ENV = "MTDSEG_WEIGHTS_CACHE"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

# registry id, embed dim, patch size
DEFAULT_WEIGHTS = {
    "dinov2": ("facebook/dinov2-base", 768, 14),
    "clip": ("openai/clip-vit-large-patch14", 1024, 14),
    "sam": ("facebook/sam-vit-base", 256, 16),
}


@dataclass(frozen=True)
class TeacherSpec:
    kind: str
    embed_dim: int
    patch_size: int
    weights_ref: str | None = None
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in TEACHER_KINDS:
            raise ConfigurationError(f"unknown teacher kind {self.kind!r}")
        if self.embed_dim <= 0 or self.patch_size <= 0:
            raise ConfigurationError("teacher embed_dim and patch_size must be positive")

    @property
    def key(self) -> str:
        return self.name or self.kind


@dataclass
class TokenFeatureMap:
    """(B, N, d) patch tokens laid out row-major over ``grid`` = (rows, cols)."""

    data: torch.Tensor
    grid: tuple[int, int]
    source: str = "student"

    def __post_init__(self):
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if self.data.dim() != 3:
            raise ContractViolation(f"token map must be (B, N, d), got {tuple(self.data.shape)}")
        if self.data.shape[1] != self.grid[0] * self.grid[1]:
            raise ContractViolation(
                f"token count {self.data.shape[1]} != grid {self.grid[0]}x{self.grid[1]}")

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.data.shape[1]

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.data).all())

    def as_image(self) -> torch.Tensor:
        """(B, d, rows, cols) view for convolutional consumers."""
        b, _, d = self.data.shape
        return self.data.transpose(1, 2).reshape(b, d, *self.grid)

    @classmethod
    def from_image(cls, x: torch.Tensor, source: str = "student") -> "TokenFeatureMap":
        b, d, h, w = x.shape
        return cls(x.reshape(b, d, h * w).transpose(1, 2), (h, w), source)


def align_token_grid(features: TokenFeatureMap, target_grid: tuple[int, int]) -> TokenFeatureMap:
    """Bilinearly resample a token map onto ``target_grid``; identity when grids match."""
    rows, cols = target_grid
    if rows <= 0 or cols <= 0:
        raise ContractViolation(f"target grid must be positive, got {target_grid}")
    if tuple(features.grid) == (rows, cols):
        return features
    x = F.interpolate(features.as_image(), size=(rows, cols), mode="bilinear",
                      align_corners=False)
    return TokenFeatureMap.from_image(x, features.source)


def patch_compatible_size(h: int, w: int, patch: int) -> tuple[int, int]:
    return max(patch, round(h / patch) * patch), max(patch, round(w / patch) * patch)


class TeacherHandle(nn.Module):
    """Frozen encoder. Subclasses implement ``_tokens`` on normalized input."""

    mean = IMAGENET_MEAN
    std = IMAGENET_STD

    def __init__(self, spec: TeacherSpec):
        super().__init__()
        self.spec = spec

    def freeze(self) -> "TeacherHandle":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # teachers never leave eval mode
        return super().train(False)

    def input_size(self, h: int, w: int) -> tuple[int, int]:
        return patch_compatible_size(h, w, self.spec.patch_size)

    def _tokens(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        raise NotImplementedError

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> TokenFeatureMap:
        if not torch.isfinite(images).all():
            raise ContractViolation("teacher input contains non-finite values")
        param = next(self.parameters())
        x = images.to(param.dtype)
        size = self.input_size(*x.shape[-2:])
        if size != tuple(x.shape[-2:]):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        mean = torch.tensor(self.mean, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype).view(1, 3, 1, 1)
        tokens, grid = self._tokens((x - mean) / std)
        return TokenFeatureMap(tokens.to(images.dtype).detach(), grid, f"teacher:{self.spec.key}")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


class MockTeacher(TeacherHandle):
    """Seeded random patch embedding followed by one random mixing layer (tanh)."""

    def __init__(self, spec: TeacherSpec):
        super().__init__(spec)
        d, p = spec.embed_dim, spec.patch_size
        rng = np.random.default_rng(spec.seed)
        fan_in = 3 * p * p

        def param(a):
            return nn.Parameter(torch.from_numpy(a.astype(np.float32)), requires_grad=False)

        self.patch_weight = param(rng.normal(0, fan_in ** -0.5, (d, 3, p, p)))
        self.patch_bias = param(rng.normal(0, 0.1, d))
        self.mix_weight = param(rng.normal(0, d ** -0.5, (d, d)))
        self.mix_bias = param(rng.normal(0, 0.1, d))
        self.freeze()

    def _tokens(self, x):
        z = F.conv2d(x, self.patch_weight, self.patch_bias, stride=self.spec.patch_size)
        grid = tuple(z.shape[-2:])
        z = z.flatten(2).transpose(1, 2)
        return torch.tanh(F.linear(z, self.mix_weight, self.mix_bias)), grid


class _HFTeacher(TeacherHandle):
    def __init__(self, spec: TeacherSpec, model: nn.Module, hidden: int, patch: int):
        super().__init__(spec)
        if hidden != spec.embed_dim:
            raise IntegrityError(
                f"{spec.kind} weights have embed dim {hidden}, spec declares {spec.embed_dim}")
        if patch != spec.patch_size:
            raise IntegrityError(
                f"{spec.kind} weights have patch size {patch}, spec declares {spec.patch_size}")
        self.model = model
        self.freeze()


class Dinov2Teacher(_HFTeacher):
    def _tokens(self, x):
        out = self.model(pixel_values=x).last_hidden_state
        p = self.spec.patch_size
        grid = (x.shape[-2] // p, x.shape[-1] // p)
        return out[:, out.shape[1] - grid[0] * grid[1]:], grid


class ClipTeacher(_HFTeacher):
    mean, std = CLIP_MEAN, CLIP_STD

    def _tokens(self, x):
        out = self.model(pixel_values=x, interpolate_pos_encoding=True).last_hidden_state
        p = self.spec.patch_size
        grid = (x.shape[-2] // p, x.shape[-1] // p)
        return out[:, 1:], grid


class SamTeacher(_HFTeacher):
    """Image encoder of SAM. Its absolute position table fixes the input size."""

    def input_size(self, h, w):
        s = self.model.config.image_size
        return s, s

    def _tokens(self, x):
        out = self.model(pixel_values=x).last_hidden_state  # (B, C, h, w)
        return out.flatten(2).transpose(1, 2), tuple(out.shape[-2:])


def weights_cache_dir() -> Path | None:
    v = os.environ.get(WEIGHTS_CACHE_ENV)
    return Path(v) if v else None


def resolve_weights(ref: str) -> str:
    """Local directory as-is; ``hf:<id>`` or a bare registry id via the hub cache."""
    if ref.startswith("hf:"):
        return ref[3:]
    return ref


def _from_pretrained(cls, ref: str, kind: str):
    location = resolve_weights(ref)
    local = Path(location).exists()
    if local and (Path(location) / "SHA256SUMS").is_file():
        verify_checksums(location)
    try:
        return cls.from_pretrained(location, cache_dir=None if local else weights_cache_dir())
    except (OSError, ValueError) as e:
        raise WeightsError(f"cannot load {kind} weights from {ref!r}: {e}") from None


def load_teacher(spec: TeacherSpec) -> TeacherHandle:
    if spec.kind == "mock":
        return MockTeacher(spec)
    if not spec.weights_ref:
        raise WeightsError(f"teacher {spec.key!r} ({spec.kind}) needs a weights_ref")
    if spec.kind == "dinov2":
        from transformers import Dinov2Model
        m = _from_pretrained(Dinov2Model, spec.weights_ref, spec.kind)
        return Dinov2Teacher(spec, m, m.config.hidden_size, m.config.patch_size)
    if spec.kind == "clip":
        from transformers import CLIPVisionModel
        m = _from_pretrained(CLIPVisionModel, spec.weights_ref, spec.kind)
        return ClipTeacher(spec, m, m.config.hidden_size, m.config.patch_size)
    from transformers import SamVisionModel
    m = _from_pretrained(SamVisionModel, spec.weights_ref, spec.kind)
    return SamTeacher(spec, m, m.config.output_channels, m.config.patch_size)


def extract_features(handle: TeacherHandle, images: torch.Tensor,
                     target_grid: tuple[int, int] | None = None) -> TokenFeatureMap:
    """Final-layer patch tokens of a frozen teacher, optionally aligned to ``target_grid``."""
    feats = handle(images)
    return feats if target_grid is None else align_token_grid(feats, target_grid)


def file_checksums(directory: Path) -> dict[str, str]:
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != "SHA256SUMS":
            out[str(p.relative_to(directory))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def verify_checksums(directory: str | Path) -> None:
    directory = Path(directory)
    sums = directory / "SHA256SUMS"
    if not sums.is_file():
        raise IntegrityError(f"no SHA256SUMS in {directory}")
    expected = dict(reversed(line.split("  ", 1)) for line in sums.read_text().splitlines())
    actual = file_checksums(directory)
    for name, digest in expected.items():
        if actual.get(name) != digest:
            raise IntegrityError(f"checksum mismatch for {directory / name}")


def write_checksums(directory: str | Path) -> Path:
    directory = Path(directory)
    lines = [f"{d}  {n}" for n, d in file_checksums(directory).items()]
    (directory / "SHA256SUMS").write_text("\n".join(lines) + "\n")
    return directory / "SHA256SUMS"


def fetch_weights(kind: str, dest: str | Path | None = None, repo_id: str | None = None) -> Path:
    """Download published weights into ``dest`` and record their SHA-256 sums."""
    from huggingface_hub import snapshot_download

    repo_id = repo_id or DEFAULT_WEIGHTS[kind][0]
    dest = Path(dest or (weights_cache_dir() or Path.home() / ".cache" / "mtdseg")) / \
        repo_id.replace("/", "--")
    try:
        snapshot_download(repo_id, local_dir=dest,
                          allow_patterns=["*.json", "*.safetensors", "*.txt"])
    except Exception as e:  # network/hub failures surface as many exception types
        raise WeightsError(f"download of {repo_id} failed: {e}") from None
    write_checksums(dest)
    return dest
