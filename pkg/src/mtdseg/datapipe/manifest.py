"""Tiling, split assignment and labeled/unlabeled partitioning.

A manifest file is JSON lines: the first line is ``{"header": {...}}`` with dataset
metadata, every following line is one TileRecord with exactly the TileRecord fields.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import ConfigurationError, ContractViolation, IngestionError
from .rasters import IMAGE_EXTENSIONS, find_label, read_size

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TileRecord:
    source_image_id: str
    tile_row: int
    tile_col: int
    tile_size: int
    split: str
    labeled: bool = False

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ContractViolation(f"unknown split {self.split!r}")
        if self.labeled and self.split != "train":
            raise ContractViolation("only train tiles can be labeled")

    @property
    def tile_id(self) -> str:
        return f"{self.source_image_id}/{self.tile_row}_{self.tile_col}"

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        """(top, left, bottom, right), half-open."""
        t, l = self.tile_row * self.tile_size, self.tile_col * self.tile_size
        return t, l, t + self.tile_size, l + self.tile_size


@dataclass(frozen=True)
class SourceImage:
    image: str  # path relative to the dataset root
    label: str
    height: int
    width: int


@dataclass(frozen=True)
class DatasetManifest:
    dataset_name: str
    class_names: tuple[str, ...]
    ignore_value: int
    tiles: tuple[TileRecord, ...]
    seed: int
    label_ratio: float
    tile_size: int
    split_ratios: tuple[float, float, float]
    sources: dict[str, SourceImage] = field(default_factory=dict)
    root: str = ""

    def __post_init__(self):
        if not 0 < self.label_ratio <= 1:
            raise ContractViolation(f"label_ratio must be in (0, 1], got {self.label_ratio}")
        for t in self.tiles:
            src = self.sources.get(t.source_image_id)
            if src is None:
                continue
            _, _, b, r = t.bounds
            if b > src.height or r > src.width:
                raise ContractViolation(f"tile {t.tile_id} exceeds its source image extent")

    def select(self, split: str, labeled: bool | None = None) -> list[TileRecord]:
        return [t for t in self.tiles
                if t.split == split and (labeled is None or t.labeled == labeled)]

    def counts(self) -> dict[str, int]:
        out = {s: len(self.select(s)) for s in SPLITS}
        out["labeled"] = len(self.select("train", True))
        out["unlabeled"] = len(self.select("train", False))
        return out

    def header(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "class_names": list(self.class_names),
            "ignore_value": self.ignore_value,
            "seed": self.seed,
            "label_ratio": self.label_ratio,
            "tile_size": self.tile_size,
            "split_ratios": list(self.split_ratios),
            "root": self.root,
            "sources": {k: asdict(v) for k, v in sorted(self.sources.items())},
        }

    def dumps(self) -> str:
        lines = [json.dumps({"header": self.header()}, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(asdict(t), sort_keys=True, separators=(",", ":")) for t in self.tiles]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or "header" not in json.loads(lines[0]):
            raise IngestionError("manifest lacks a header line")
        h = json.loads(lines[0])["header"]
        tiles = tuple(TileRecord(**json.loads(ln)) for ln in lines[1:])
        return cls(dataset_name=h["dataset_name"], class_names=tuple(h["class_names"]),
                   ignore_value=h["ignore_value"], tiles=tiles, seed=h["seed"],
                   label_ratio=h["label_ratio"], tile_size=h["tile_size"],
                   split_ratios=tuple(h["split_ratios"]), root=h.get("root", ""),
                   sources={k: SourceImage(**v) for k, v in h.get("sources", {}).items()})

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise IngestionError(f"manifest not found: {path}")
        return cls.loads(path.read_text())


def tile_grid(height: int, width: int, tile_size: int) -> list[tuple[int, int]]:
    """Non-overlapping tile indices; trailing remainders are dropped."""
    if tile_size <= 0:
        raise ConfigurationError("tile_size must be positive")
    if tile_size > min(height, width):
        raise ConfigurationError(f"tile_size {tile_size} exceeds image of size {height}x{width}")
    return [(r, c) for r in range(height // tile_size) for c in range(width // tile_size)]


def allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Split ``n`` items by ``ratios`` with largest-remainder rounding (ties go to earlier buckets)."""
    total = float(sum(ratios))
    if total <= 0 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"invalid split ratios {tuple(ratios)}")
    exact = [n * r / total for r in ratios]
    out = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - out[i]), i))
    for i in order[: n - sum(out)]:
        out[i] += 1
    return out


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scan_dataset(root: str | Path) -> dict[str, SourceImage]:
    """Pair ``images/*`` with ``labels/*`` by basename and read their sizes."""
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise IngestionError(f"no images/ directory under {root}")
    if not lbl_dir.is_dir():
        raise IngestionError(f"no labels/ directory under {root}")
    sources = {}
    for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS):
        lbl = find_label(lbl_dir, img.stem)
        if lbl is None:
            raise IngestionError(f"missing label raster for image {img}")
        h, w, ch = read_size(img)
        if ch != 3:
            raise IngestionError(f"{img}: expected 3-channel RGB, got {ch} channels")
        lh, lw, lch = read_size(lbl)
        if lch != 1:
            raise IngestionError(f"{lbl}: expected single-channel label raster, got {lch}")
        if (lh, lw) != (h, w):
            raise IngestionError(f"{lbl}: label size {lh}x{lw} != image size {h}x{w}")
        sources[img.stem] = SourceImage(image=str(img.relative_to(root)),
                                        label=str(lbl.relative_to(root)), height=h, width=w)
    if not sources:
        raise IngestionError(f"no images found under {img_dir}")
    return sources


def build_manifest(dataset_root: str | Path, tile_size: int,
                   split_ratios: Sequence[float] = (6, 2, 2), seed: int = 0, *,
                   dataset_name: str = "", class_names: Sequence[str] = (),
                   ignore_value: int = 255, label_ratio: float = 1.0,
                   sources: dict[str, SourceImage] | None = None) -> DatasetManifest:
    """Tile every source image and assign whole images to train/val/test.

    ``sources`` may be passed to skip the directory scan (e.g. for synthetic extents).
    """
    if len(split_ratios) != 3:
        raise ConfigurationError("split_ratios must have three entries (train, val, test)")
    if sources is None:
        sources = scan_dataset(dataset_root)
    ids = sorted(sources)
    grids = {i: tile_grid(sources[i].height, sources[i].width, tile_size) for i in ids}

    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = allocate(len(ids), split_ratios)
    split_of = {}
    for rank, k in enumerate(perm):
        split_of[ids[k]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    tiles = tuple(TileRecord(i, r, c, tile_size, split_of[i]) for i in ids for r, c in grids[i])
    manifest = DatasetManifest(
        dataset_name=dataset_name or Path(dataset_root).name, class_names=tuple(class_names),
        ignore_value=ignore_value, tiles=tiles, seed=seed, label_ratio=1.0,
        tile_size=tile_size, split_ratios=tuple(float(r) for r in split_ratios),
        sources=dict(sources), root=str(dataset_root))
    return partition_labeled(manifest, label_ratio, seed)


def partition_labeled(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    if not 0 < ratio <= 1:
        raise ConfigurationError(f"label ratio must be in (0, 1], got {ratio}")
    train_idx = [i for i, t in enumerate(manifest.tiles) if t.split == "train"]
    if not train_idx:
        raise ConfigurationError("manifest has no train tiles to partition")
    n_labeled = round_half_up(ratio * len(train_idx))
    if n_labeled == 0:
        raise ConfigurationError(
            f"label ratio {ratio} yields zero labeled tiles out of {len(train_idx)}")
    rng = np.random.default_rng([seed, 1])
    chosen = {train_idx[k] for k in rng.permutation(len(train_idx))[:n_labeled]}
    tiles = tuple(replace(t, labeled=(i in chosen)) if t.split == "train" else t
                  for i, t in enumerate(manifest.tiles))
    return replace(manifest, tiles=tiles, label_ratio=float(ratio))
