import random

import numpy as np
import pytest
import torch

from slimres.core import LayerSpec, SlimmableModelSpec


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_spec():
    def build(lower=0.25, num_classes=5, resolutions=(16, 12, 8)):
        layers = [
            LayerSpec("convolution", 3, 16, kernel=3, stride=1),
            LayerSpec("normalization", 16, 16),
            LayerSpec("activation", 16, 16),
            LayerSpec("depthwise-convolution", 16, 16, kernel=3, stride=2),
            LayerSpec("normalization", 16, 16),
            LayerSpec("activation", 16, 16),
            LayerSpec("convolution", 16, 32, kernel=1),
            LayerSpec("normalization", 32, 32),
            LayerSpec("activation", 32, 32),
            LayerSpec("pooling", 32, 32),
            LayerSpec("fully-connected", 32, num_classes),
        ]
        return SlimmableModelSpec(
            layers=tuple(layers),
            width_lower_bound=lower,
            channel_divisor=8,
            num_classes=num_classes,
            input_channels=3,
            resolutions=resolutions,
        )

    return build


@pytest.fixture
def folder_dataset(tmp_path):
    """Writes a small folder-of-images dataset and returns its root.

    Classes are separable by mean color so a few training steps can learn
    something; image content is deterministic.
    """

    def build(num_classes=3, per_class=30, size=16, seed=0):
        from PIL import Image

        rng = np.random.default_rng(seed)
        root = tmp_path / f"imgs_{num_classes}_{per_class}_{size}_{seed}"
        for c in range(num_classes):
            cdir = root / f"class_{c}"
            cdir.mkdir(parents=True)
            base = np.zeros((size, size, 3), dtype=np.float64)
            base[..., c % 3] = 160 + 60 * (c // 3)
            for i in range(per_class):
                noise = rng.normal(0, 25, size=(size, size, 3))
                arr = np.clip(base + noise, 0, 255).astype(np.uint8)
                Image.fromarray(arr).save(cdir / f"{i:03d}.png")
        return root

    return build


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    return random.Random(0)
