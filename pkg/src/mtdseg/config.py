"""Experiment configuration (YAML) with strict unknown-key rejection."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datapipe.augment import AugmentationSpec
from .engine import EmaConfig, LossWeights, SSLConfig
from .errors import ConfigurationError
from .student import FusionWeights, StudentConfig
from .teachers import DEFAULT_WEIGHTS, TeacherSpec


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    root: str = "data/synthetic"
    name: str = "synthetic"
    tile_size: int = Field(512, gt=0)
    ignore_value: int = 255
    class_names: list[str] = Field(default_factory=list)


class SplitSection(_Section):
    ratios: tuple[float, float, float] = (6, 2, 2)
    label_ratio: float = Field(0.05, gt=0, le=1)
    seed: int = 0
    manifest: Optional[str] = None


class StudentSection(_Section):
    embed_dim: int = 384
    patch_size: int = 14
    depth: int = 12
    num_heads: int = 6
    pyramid_taps: tuple[int, int, int, int] = (2, 5, 8, 11)
    decoder_channels: int = 128
    mlp_ratio: float = 4.0
    unified_scale: int = 2
    backbone_weights: Optional[str] = None


class FusionSection(_Section):
    omega_s: float = Field(1.0, ge=0)
    omega_d: float = Field(0.5, ge=0)


class ModelSection(_Section):
    student: StudentSection = StudentSection()
    fusion: FusionSection = FusionSection()
    mode: Literal["fused", "plain"] = "fused"


class TeacherEntry(_Section):
    kind: Literal["dinov2", "clip", "sam", "mock"]
    embed_dim: int = Field(gt=0)
    patch_size: int = Field(gt=0)
    weights_ref: Optional[str] = None
    seed: int = 0
    name: Optional[str] = None


class SSLSection(_Section):
    lambda_l: float = Field(1 / 3, ge=0)
    lambda_u: float = Field(1 / 3, ge=0)
    lambda_d: float = Field(1 / 3, ge=0)
    ema_momentum: float = Field(0.999, ge=0, le=1)
    tau: float = Field(0.95, gt=0, le=1)
    distill_labeled: bool = False


class AugmentSection(_Section):
    crop_size: int = 518
    resize_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = Field(0.5, ge=0, le=1)
    brightness: float = Field(0.5, ge=0)
    contrast: float = Field(0.5, ge=0)
    saturation: float = Field(0.5, ge=0)
    hue: float = Field(0.25, ge=0, le=0.5)
    jitter_prob: float = Field(0.8, ge=0, le=1)
    cutmix_prob: float = Field(0.5, ge=0, le=1)
    cutmix_area_range: tuple[float, float] = (0.2, 0.5)
    cutmix_aspect_range: tuple[float, float] = (0.5, 2.0)


class OptimSection(_Section):
    encoder_lr: float = Field(5e-6, gt=0)
    decoder_lr: float = Field(2e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(0.01, ge=0)
    batch_size: int = Field(8, gt=0)
    epochs: int = Field(60, gt=0)
    max_steps: Optional[int] = Field(None, gt=0)
    lr_schedule: Literal["constant", "poly"] = "constant"
    poly_power: float = 0.9


class IOSection(_Section):
    output_dir: str = "runs/default"
    checkpoint_every: int = Field(500, gt=0)
    validate_every: int = Field(500, gt=0)
    eval_batch_size: int = Field(16, gt=0)
    num_workers: int = Field(0, ge=0)


class ExperimentConfig(_Section):
    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    split: SplitSection = SplitSection()
    model: ModelSection = ModelSection()
    teachers: list[TeacherEntry] = Field(default_factory=lambda: [
        TeacherEntry(kind="dinov2", embed_dim=768, patch_size=14,
                     weights_ref="hf:" + DEFAULT_WEIGHTS["dinov2"][0]),
        TeacherEntry(kind="clip", embed_dim=1024, patch_size=14,
                     weights_ref="hf:" + DEFAULT_WEIGHTS["clip"][0]),
    ])
    ssl: SSLSection = SSLSection()
    augment: AugmentSection = AugmentSection()
    optim: OptimSection = OptimSection()
    io: IOSection = IOSection()

    @field_validator("teachers")
    @classmethod
    def _unique_names(cls, teachers: list[TeacherEntry]) -> list[TeacherEntry]:
        kinds = [t.kind for t in teachers]
        out = []
        for i, t in enumerate(teachers):
            if t.name is None and kinds.count(t.kind) > 1:
                t = t.model_copy(update={"name": f"{t.kind}{kinds[:i].count(t.kind)}"})
            out.append(t)
        keys = [t.name or t.kind for t in out]
        if len(set(keys)) != len(keys):
            raise ValueError(f"teacher names must be unique, got {keys}")
        return out

    @model_validator(mode="after")
    def _cross_checks(self):
        s = self.model.student
        if self.augment.crop_size % s.patch_size:
            raise ValueError(f"crop_size {self.augment.crop_size} not divisible by "
                             f"student patch size {s.patch_size}")
        if self.ssl.lambda_l + self.ssl.lambda_u + self.ssl.lambda_d <= 0:
            raise ValueError("loss weights must have a positive sum")
        if self.model.fusion.omega_s == 0 and self.model.fusion.omega_d == 0:
            raise ValueError("fusion weights cannot both be zero")
        return self

    # conversions into module-level types

    @property
    def num_classes(self) -> int:
        if not self.dataset.class_names:
            raise ConfigurationError("dataset.class_names is empty")
        return len(self.dataset.class_names)

    def student_config(self) -> StudentConfig:
        s = self.model.student
        return StudentConfig(num_classes=self.num_classes, image_size=self.augment.crop_size,
                             **s.model_dump())

    def fusion_weights(self) -> FusionWeights:
        return FusionWeights(**self.model.fusion.model_dump())

    def teacher_specs(self) -> list[TeacherSpec]:
        return [TeacherSpec(**t.model_dump()) for t in self.teachers]

    def ssl_config(self) -> SSLConfig:
        s = self.ssl
        return SSLConfig(weights=LossWeights(s.lambda_l, s.lambda_u, s.lambda_d),
                         ema=EmaConfig(s.ema_momentum), tau=s.tau,
                         distill_labeled=s.distill_labeled, mode=self.model.mode,
                         ignore_value=self.dataset.ignore_value)

    def augmentation(self) -> AugmentationSpec:
        return AugmentationSpec(**self.augment.model_dump()).validate(self.model.student.patch_size)

    def manifest_path(self) -> Path:
        if self.split.manifest:
            return Path(self.split.manifest)
        return Path(self.io.output_dir) / "splits" / manifest_name(self.dataset.name,
                                                                 self.split.label_ratio)

    def override(self, **dotted) -> "ExperimentConfig":
        """Return a copy with ``section__field=value`` overrides applied and revalidated."""
        data = self.model_dump()
        for key, value in dotted.items():
            if value is None:
                continue
            node = data
            *parents, leaf = key.split("__")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return validate_config(data)

    def dumps(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def manifest_name(dataset: str, ratio: float) -> str:
    return f"{dataset}_labeled{ratio:g}.jsonl"


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from None


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"invalid YAML: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    return validate_config(data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return loads_config(path.read_text())


def mock_teacher(i: int, embed_dim: int = 48, patch_size: int = 16) -> TeacherEntry:
    return TeacherEntry(kind="mock", embed_dim=embed_dim, patch_size=patch_size, seed=i + 1)


def desk_config(root: str | Path = "data/synthetic", output_dir: str | Path = "runs/desk",
                **overrides) -> ExperimentConfig:
    """Small CPU configuration on the bundled synthetic dataset with two mock teachers."""
    from .datapipe.synthetic import CLASS_NAMES

    base = ExperimentConfig(
        dataset=DatasetSection(root=str(root), name="synthetic", tile_size=64,
                               class_names=list(CLASS_NAMES)),
        split=SplitSection(label_ratio=0.1),
        model=ModelSection(student=StudentSection(embed_dim=32, patch_size=16, depth=4,
                                                  num_heads=2, pyramid_taps=(0, 1, 2, 3),
                                                  decoder_channels=32)),
        teachers=[mock_teacher(0), mock_teacher(1)],
        ssl=SSLSection(ema_momentum=0.99),
        augment=AugmentSection(crop_size=64, resize_range=(0.75, 1.5)),
        optim=OptimSection(encoder_lr=1e-3, decoder_lr=1e-3, max_steps=1000),
        io=IOSection(output_dir=str(output_dir), checkpoint_every=250, validate_every=1000,
                     eval_batch_size=64),
    )
    return base.override(**overrides) if overrides else base


def teachers_from_kinds(kinds: list[str], current: list[TeacherEntry],
                        patch_size: int) -> list[TeacherEntry]:
    """Expand a ``--teachers`` list like ``mock,mock`` or ``dinov2,clip`` into entries."""
    out = []
    for i, kind in enumerate(kinds):
        same = [t for t in current if t.kind == kind]
        if kind == "mock":
            proto = same[0] if same else mock_teacher(i, patch_size=patch_size)
            out.append(proto.model_copy(update={"seed": i + 1, "name": None}))
        elif kind in DEFAULT_WEIGHTS:
            if same:
                out.append(same[0].model_copy(update={"name": None}))
            else:
                ref, dim, patch = DEFAULT_WEIGHTS[kind]
                out.append(TeacherEntry(kind=kind, embed_dim=dim, patch_size=patch,
                                        weights_ref="hf:" + ref))
        else:
            raise ConfigurationError(f"unknown teacher kind {kind!r}")
    return out
