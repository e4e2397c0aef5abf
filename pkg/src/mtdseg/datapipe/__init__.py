from .augment import (AugmentationSpec, CutMixBox, color_jitter, cutmix, cutmix_tensors,
                      sample_cutmix_box, strong_augment, weak_augment)
from .manifest import (DatasetManifest, TileRecord, build_manifest, partition_labeled,
                       tile_grid)
from .sample import SegmentationSample

__all__ = [
    "AugmentationSpec", "CutMixBox", "DatasetManifest", "SegmentationSample", "TileRecord",
    "build_manifest", "color_jitter", "cutmix", "cutmix_tensors", "partition_labeled",
    "sample_cutmix_box", "strong_augment", "tile_grid", "weak_augment",
]
