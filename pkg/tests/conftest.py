import os

import pytest
import torch

from mtdseg.config import desk_config
from mtdseg.datapipe.manifest import build_manifest
from mtdseg.datapipe.synthetic import CLASS_NAMES, generate_synthetic

# hermetic: never reach the model hub from tests
os.environ.setdefault("HF_HUB_OFFLINE", "1")


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """Ten 128 px synthetic images: 40 tiles of 64 px."""
    return generate_synthetic(tmp_path_factory.mktemp("syn"), num_images=10, image_size=128, seed=3)


@pytest.fixture(scope="session")
def tiny_manifest(tiny_root):
    return build_manifest(tiny_root, 64, (6, 2, 2), seed=0, dataset_name="synthetic",
                          class_names=CLASS_NAMES, label_ratio=0.25)


@pytest.fixture
def tiny_config(tiny_root, tmp_path):
    return desk_config(tiny_root, tmp_path / "run", optim__batch_size=4, optim__max_steps=6,
                       io__validate_every=1000, io__checkpoint_every=3, io__eval_batch_size=8)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    from acceptance_registry import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
