"""Tile datasets and a step-indexed batch schedule.

Every random draw is derived from (seed, tile_id, epoch), and batch composition is a
pure function of the global step, so serial, multi-worker and resumed runs yield
identical streams.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from ..errors import ConfigurationError
from .augment import AugmentationSpec, CutMixBox, strong_view, weak_augment
from .manifest import DatasetManifest, TileRecord
from .rasters import read_image, read_label
from .sample import SegmentationSample

STREAM_LABELED, STREAM_UNLABELED = 0, 1


def sample_rng(seed: int, tile_id: str, epoch: int, stream: int) -> np.random.Generator:
    key = zlib.crc32(tile_id.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, stream, key, epoch]))


def load_tile(manifest: DatasetManifest, record: TileRecord, root: str | Path | None = None,
              with_label: bool = True) -> SegmentationSample:
    root = Path(root if root is not None else manifest.root)
    src = manifest.sources[record.source_image_id]
    t, l, b, r = record.bounds
    image = read_image(str(root / src.image))[t:b, l:r]
    if with_label:
        label = read_label(str(root / src.label))[t:b, l:r]
    else:
        label = np.zeros(image.shape[:2], dtype=np.int64)
    return SegmentationSample.from_uint8(image, label, manifest.ignore_value)


def _chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


def _encode_box(box: CutMixBox | None) -> torch.Tensor:
    if box is None:
        return torch.zeros(5, dtype=torch.long)
    return torch.tensor([1, box.top, box.left, box.height, box.width], dtype=torch.long)


def decode_boxes(encoded: torch.Tensor) -> list[CutMixBox | None]:
    return [CutMixBox(*map(int, row[1:])) if row[0] else None for row in encoded]


class LabeledTiles(Dataset):
    """Weak-augmented labeled tiles, indexed by (tile index, epoch)."""

    def __init__(self, manifest: DatasetManifest, records: Sequence[TileRecord],
                 spec: AugmentationSpec, seed: int, root=None):
        self.manifest, self.records, self.spec, self.seed, self.root = \
            manifest, list(records), spec, seed, root

    def __len__(self):
        return len(self.records)

    def __getitem__(self, key):
        idx, epoch = key
        rec = self.records[idx]
        rng = sample_rng(self.seed, rec.tile_id, epoch, STREAM_LABELED)
        s = weak_augment(load_tile(self.manifest, rec, self.root), rng, self.spec)
        return {"image": _chw(s.image), "label": torch.from_numpy(s.label)}


class UnlabeledTiles(Dataset):
    """Weak view, strong (jittered) view and a pending CutMix box per unlabeled tile.

    Ground truth is never read; ``valid`` marks pixels that are not crop padding.
    """

    def __init__(self, manifest: DatasetManifest, records: Sequence[TileRecord],
                 spec: AugmentationSpec, seed: int, root=None):
        self.manifest, self.records, self.spec, self.seed, self.root = \
            manifest, list(records), spec, seed, root

    def __len__(self):
        return len(self.records)

    def __getitem__(self, key):
        idx, epoch = key
        rec = self.records[idx]
        rng = sample_rng(self.seed, rec.tile_id, epoch, STREAM_UNLABELED)
        weak = weak_augment(load_tile(self.manifest, rec, self.root, with_label=False),
                            rng, self.spec)
        strong, box = strong_view(weak, rng, self.spec)
        return {"weak": _chw(weak.image), "strong": _chw(strong),
                "valid": torch.from_numpy(weak.valid_mask), "box": _encode_box(box)}


class EvalTiles(Dataset):
    def __init__(self, manifest: DatasetManifest, records: Sequence[TileRecord], root=None):
        self.manifest, self.records, self.root = manifest, list(records), root

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        s = load_tile(self.manifest, self.records[idx], self.root)
        return {"image": _chw(s.image), "label": torch.from_numpy(s.label)}


@dataclass(frozen=True)
class BatchSchedule:
    """Maps a global step to the (tile index, epoch) keys of its batch.

    Each epoch is a fresh seeded permutation; with ``drop_last`` the trailing partial
    batch is skipped, otherwise it is yielded short.
    """

    n: int
    batch_size: int
    seed: int
    stream: int
    drop_last: bool = False

    def __post_init__(self):
        if self.n <= 0:
            raise ConfigurationError("batch schedule over an empty tile set")
        if self.batch_size <= 0:
            raise ConfigurationError("batch size must be positive")

    @property
    def steps_per_epoch(self) -> int:
        if self.drop_last and self.n >= self.batch_size:
            return self.n // self.batch_size
        return math.ceil(self.n / self.batch_size)

    def batch(self, step: int) -> list[tuple[int, int]]:
        epoch, b = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.seed, self.stream, epoch]).permutation(self.n)
        if self.n < self.batch_size:
            # fewer tiles than one batch: repeat the permutation to fill it
            perm = np.resize(perm, self.batch_size)
            return [(int(i), epoch) for i in perm]
        return [(int(i), epoch) for i in perm[b * self.batch_size:(b + 1) * self.batch_size]]


class ScheduleSampler(Sampler):
    def __init__(self, schedule: BatchSchedule, start: int, stop: int):
        self.schedule, self.start, self.stop = schedule, start, stop

    def __iter__(self) -> Iterator[list[tuple[int, int]]]:
        for step in range(self.start, self.stop):
            yield self.schedule.batch(step)

    def __len__(self):
        return self.stop - self.start


def batch_loader(dataset: Dataset, schedule: BatchSchedule, start: int, stop: int,
                 num_workers: int = 0) -> DataLoader:
    return DataLoader(dataset, batch_sampler=ScheduleSampler(schedule, start, stop),
                      num_workers=num_workers)
