import numpy as np
import pytest
from PIL import Image

from twostage_anomaly.config import ExperimentConfig

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """16x16 images, narrow layers: fast enough for pipeline tests."""
    return ExperimentConfig.from_dict({
        "image_size": 16,
        "ie": {"n_blocks": 2, "widths": [8, 16], "d_z": 8, "moment_hidden": 16,
               "disc_hidden": 16},
        "expert": {"base_channels": 4, "n_down": 1, "n_res": 1, "d_s": 4,
                   "detail_channels": 4, "mlp_hidden": 8},
        "pm": {"backbone": "fallback", "layers": ["conv1_2", "conv2_2"],
               "layer_weights": [1.0, 1.0]},
        "train": {"ie_epochs": 2, "expert_epochs": 2, "ie_optimizer": "adam"},
    })


def _png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


@pytest.fixture
def folder_dataset(tmp_path):
    """MVTec-style category with 10 train images and a 3-image crack defect."""
    rng = np.random.default_rng(0)
    root = tmp_path / "widget"
    for i in range(10):
        _png(root / "train" / "good" / f"{i:03d}.png",
             rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
    for i in range(3):
        _png(root / "test" / "crack" / f"{i:03d}.png",
             rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
        mask = np.zeros((20, 20), np.uint8)
        mask[5:10, 5:10] = 255
        _png(root / "ground_truth" / "crack" / f"{i:03d}_mask.png", mask)
    for i in range(2):
        _png(root / "test" / "good" / f"{i:03d}.png",
             rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
    return root
