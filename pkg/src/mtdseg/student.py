"""Trainable segmentation network.

encoder -> patch tokens at four taps; per-teacher translator MLPs map the deepest
tokens into each teacher's space, per-teacher projectors map them back, and a
weighted sum of the original and projected tokens replaces the deepest tap before a
DPT-style decoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation, IngestionError
from .teachers import IMAGENET_MEAN, IMAGENET_STD, TokenFeatureMap, _from_pretrained

MODES = ("fused", "plain")


@dataclass(frozen=True)
class StudentConfig:
    num_classes: int
    embed_dim: int = 384
    patch_size: int = 14
    depth: int = 12
    num_heads: int = 6
    pyramid_taps: tuple[int, ...] = (2, 5, 8, 11)
    decoder_channels: int = 128
    image_size: int = 518
    mlp_ratio: float = 4.0
    unified_scale: int = 2
    backbone_weights: str | None = None

    def __post_init__(self):
        taps = tuple(self.pyramid_taps)
        object.__setattr__(self, "pyramid_taps", taps)
        if len(taps) != 4 or any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigurationError(f"pyramid_taps must be 4 strictly increasing ints, got {taps}")
        if taps[-1] != self.depth - 1 or taps[0] < 0:
            raise ConfigurationError("the last pyramid tap must be the final encoder layer")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.num_classes < 1 or self.unified_scale < 1:
            raise ConfigurationError("num_classes and unified_scale must be positive")


@dataclass(frozen=True)
class FusionWeights:
    omega_s: float = 1.0
    omega_d: float = 0.5

    def __post_init__(self):
        if self.omega_s < 0 or self.omega_d < 0:
            raise ConfigurationError("fusion weights must be non-negative")
        if self.omega_s == 0 and self.omega_d == 0:
            raise ConfigurationError("fusion weights cannot both be zero")


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)) and m.bias is not None:
        nn.init.zeros_(m.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        x = F.scaled_dot_product_attention(q, k, v)
        return self.proj(x.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """Plain ViT. Returns layer-normed patch tokens at each pyramid tap."""

    def __init__(self, cfg: StudentConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.embed_dim, cfg.patch_size
        g = cfg.image_size // p
        self.patch_embed = nn.Conv2d(3, d, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g, d))
        self.blocks = nn.ModuleList(Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def _pos(self, grid):
        g = self.cfg.image_size // self.cfg.patch_size
        if grid == (g, g):
            return self.pos_embed
        pe = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        pe = F.interpolate(pe, size=grid, mode="bicubic", align_corners=False)
        return pe.flatten(2).transpose(1, 2)

    def forward(self, x) -> tuple[list[torch.Tensor], tuple[int, int]]:
        z = self.patch_embed(x)
        grid = tuple(z.shape[-2:])
        z = z.flatten(2).transpose(1, 2) + self._pos(grid)
        taps, out = set(self.cfg.pyramid_taps), []
        for i, blk in enumerate(self.blocks):
            z = blk(z)
            if i in taps:
                out.append(self.norm(z))
        return out, grid


class HFDinov2Encoder(nn.Module):
    """Published DINOv2 backbone (transformers layout) exposing the same tap interface."""

    def __init__(self, cfg: StudentConfig):
        super().__init__()
        from transformers import Dinov2Model

        self.model = _from_pretrained(Dinov2Model, cfg.backbone_weights, "student backbone")
        c = self.model.config
        if (c.hidden_size, c.patch_size, c.num_hidden_layers) != \
                (cfg.embed_dim, cfg.patch_size, cfg.depth):
            raise ConfigurationError(
                "student backbone weights disagree with StudentConfig "
                f"(dim {c.hidden_size}, patch {c.patch_size}, depth {c.num_hidden_layers})")
        self.cfg = cfg

    def forward(self, x):
        p = self.cfg.patch_size
        grid = (x.shape[-2] // p, x.shape[-1] // p)
        hs = self.model(pixel_values=x, output_hidden_states=True).hidden_states
        n = grid[0] * grid[1]
        return [self.model.layernorm(hs[t + 1])[:, -n:] for t in self.cfg.pyramid_taps], grid


class Translator(nn.Module):
    """Token-wise two-layer MLP: W2 · ReLU(W1 · f + b1) + b2."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_in
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class ResidualConvUnit(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


class FusionBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.skip_unit = ResidualConvUnit(ch)
        self.unit = ResidualConvUnit(ch)
        self.out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, skip=None):
        if skip is not None:
            x = x + self.skip_unit(skip)
        return self.out(self.unit(x))


class DPTDecoder(nn.Module):
    """Four taps -> 1x1 projection -> transposed-conv resize to one resolution ->
    fusion blocks from deep to shallow -> conv head -> bilinear upsample."""

    def __init__(self, in_dim: int, channels: int, num_classes: int, scale: int = 2):
        super().__init__()
        self.project = nn.ModuleList(nn.Conv2d(in_dim, channels, 1) for _ in range(4))
        self.resize = nn.ModuleList(
            nn.ConvTranspose2d(channels, channels, scale, stride=scale) if scale > 1
            else nn.Identity() for _ in range(4))
        self.fusion = nn.ModuleList(FusionBlock(channels) for _ in range(4))
        self.head = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(channels, num_classes, 1))

    def forward(self, pyramid: Sequence[TokenFeatureMap], out_size: tuple[int, int]):
        if len(pyramid) != 4:
            raise ContractViolation(f"decoder expects 4 pyramid levels, got {len(pyramid)}")
        grid = pyramid[0].grid
        if any(p.grid != grid for p in pyramid):
            raise ContractViolation("pyramid levels do not share one token grid")
        h, w = out_size
        if h % grid[0] or w % grid[1]:
            raise ConfigurationError(f"output size {out_size} is not a multiple of grid {grid}")
        feats = [rs(pj(p.as_image())) for p, pj, rs in zip(pyramid, self.project, self.resize)]
        path = self.fusion[3](feats[3])
        for i in (2, 1, 0):
            path = self.fusion[i](path, feats[i])
        logits = self.head(path)
        if tuple(logits.shape[-2:]) != (h, w):
            logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return logits


def fuse(f_s: TokenFeatureMap, projected: Sequence[TokenFeatureMap],
         w: FusionWeights) -> TokenFeatureMap:
    """omega_s * f_s + omega_d * sum(projected)."""
    for p in projected:
        if p.data.shape != f_s.data.shape:
            raise ContractViolation(
                f"fusion shape mismatch {tuple(p.data.shape)} vs {tuple(f_s.data.shape)}")
    out = w.omega_s * f_s.data
    if projected and w.omega_d != 0:
        out = out + w.omega_d * torch.stack([p.data for p in projected]).sum(0)
    return TokenFeatureMap(out, f_s.grid, "student")


@dataclass
class ForwardResult:
    logits: torch.Tensor
    f_s: TokenFeatureMap
    translated: dict[str, TokenFeatureMap] = field(default_factory=dict)
    fused: bool = False


class SegmentationModel(nn.Module):
    """Student network. Submodule names fix the checkpoint scheme:
    ``encoder.*``, ``translator.<teacher>.*``, ``projector.<teacher>.*``, ``decoder.*``."""

    def __init__(self, cfg: StudentConfig, teacher_dims: Mapping[str, int] | None = None,
                 fusion: FusionWeights | None = None):
        super().__init__()
        self.cfg = cfg
        self.teacher_dims = dict(teacher_dims or {})
        self.fusion_weights = fusion or FusionWeights()
        d = cfg.embed_dim
        self.encoder = HFDinov2Encoder(cfg) if cfg.backbone_weights else ViTEncoder(cfg)
        self.translator = nn.ModuleDict({k: Translator(d, dt) for k, dt in self.teacher_dims.items()})
        self.projector = nn.ModuleDict({k: nn.Linear(dt, d) for k, dt in self.teacher_dims.items()})
        self.decoder = DPTDecoder(d, cfg.decoder_channels, cfg.num_classes, cfg.unified_scale)
        for name, m in self.named_modules():
            if not name.startswith("encoder.model"):
                _init_weights(m)
        nn.init.zeros_(self.decoder.head[-1].weight)
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1),
                             persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1),
                             persistent=False)

    @property
    def teachers(self) -> list[str]:
        return list(self.teacher_dims)

    def encode(self, images: torch.Tensor) -> tuple[list[TokenFeatureMap], TokenFeatureMap]:
        h, w = images.shape[-2:]
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ContractViolation(f"input {h}x{w} is not divisible by patch size {p}")
        taps, grid = self.encoder((images - self.pixel_mean) / self.pixel_std)
        pyramid = [TokenFeatureMap(t, grid, "student") for t in taps]
        return pyramid, pyramid[-1]

    def translate(self, f_s: TokenFeatureMap, teacher: str) -> TokenFeatureMap:
        if teacher not in self.translator:
            raise ConfigurationError(f"no translator for teacher {teacher!r}")
        if f_s.dim != self.cfg.embed_dim:
            raise ContractViolation(f"student features have dim {f_s.dim}, expected {self.cfg.embed_dim}")
        return TokenFeatureMap(self.translator[teacher](f_s.data), f_s.grid, "student")

    def project_back(self, translated: TokenFeatureMap, teacher: str) -> TokenFeatureMap:
        if teacher not in self.projector:
            raise ConfigurationError(f"no projector for teacher {teacher!r}")
        if translated.dim != self.teacher_dims[teacher]:
            raise ContractViolation(
                f"translated dim {translated.dim} != teacher {teacher!r} dim "
                f"{self.teacher_dims[teacher]}")
        return TokenFeatureMap(self.projector[teacher](translated.data), translated.grid, "student")

    def decode(self, pyramid: Sequence[TokenFeatureMap], out_size: tuple[int, int]) -> torch.Tensor:
        """Logits of shape (B, C, H, W)."""
        return self.decoder(pyramid, out_size)

    def forward(self, images: torch.Tensor, mode: str = "fused",
                translate: bool = False) -> ForwardResult:
        """Full pass. ``translate`` forces translator outputs (for distillation) even in plain mode."""
        if mode not in MODES:
            raise ConfigurationError(f"unknown inference mode {mode!r}")
        pyramid, f_s = self.encode(images)
        use_fusion = mode == "fused" and self.fusion_weights.omega_d > 0 and bool(self.teachers)
        translated = {}
        if use_fusion or translate:
            translated = {k: self.translate(f_s, k) for k in self.teachers}
        if use_fusion:
            projected = [self.project_back(translated[k], k) for k in self.teachers]
            pyramid = pyramid[:-1] + [fuse(f_s, projected, self.fusion_weights)]
        elif mode == "fused" and self.fusion_weights.omega_s != 1.0:
            pyramid = pyramid[:-1] + [fuse(f_s, [], self.fusion_weights)]
        logits = self.decode(pyramid, tuple(images.shape[-2:]))
        return ForwardResult(logits, f_s, translated, use_fusion)

    def predict(self, images: torch.Tensor, mode: str = "fused") -> torch.Tensor:
        return self.forward(images, mode).logits

    def param_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(encoder params, all other params)."""
        enc = [p for n, p in self.named_parameters() if n.startswith("encoder.")]
        rest = [p for n, p in self.named_parameters() if not n.startswith("encoder.")]
        return enc, rest

    def metadata(self) -> dict:
        return {"student": asdict(self.cfg), "fusion": asdict(self.fusion_weights),
                "teacher_dims": dict(self.teacher_dims)}

    @classmethod
    def from_metadata(cls, meta: Mapping) -> "SegmentationModel":
        cfg = dict(meta["student"])
        cfg["pyramid_taps"] = tuple(cfg["pyramid_taps"])
        return cls(StudentConfig(**cfg), meta.get("teacher_dims", {}),
                   FusionWeights(**meta["fusion"]))


def save_checkpoint(path: str | Path, model: SegmentationModel, **extra) -> Path:
    """Single archive: named parameter arrays plus metadata and any extra state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"params": model.state_dict(), "meta": model.metadata(), **extra}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(ckpt: Mapping, source: str = "ema") -> SegmentationModel:
    """Rebuild a model and load the ``student`` or ``ema`` parameter set."""
    model = SegmentationModel.from_metadata(ckpt["meta"])
    key = {"student": "params", "ema": "ema_params"}.get(source)
    if key is None:
        raise ConfigurationError(f"unknown model source {source!r}")
    state = ckpt.get(key)
    if state is None:
        raise ConfigurationError(f"checkpoint has no {source!r} parameters")
    model.load_state_dict(state)
    return model


def count_params(model: nn.Module) -> float:
    return sum(p.numel() for p in model.parameters()) / 1e6


def infer_tiles(model: SegmentationModel, images: torch.Tensor, mode: str = "fused") -> torch.Tensor:
    """Logits for tiles of any size: resize to patch multiples, predict, resize back."""
    h, w = images.shape[-2:]
    p = model.cfg.patch_size
    size = (max(p, round(h / p) * p), max(p, round(w / p) * p))
    x = images if size == (h, w) else F.interpolate(images, size=size, mode="bilinear",
                                                     align_corners=False)
    logits = model.predict(x, mode)
    if size != (h, w):
        logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
    return logits
