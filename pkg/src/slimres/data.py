"""Dataset ingestion, augmentation and multi-resolution batch preparation.

All randomness (split shuffles, crop offsets, flips, epoch order) flows from
explicit seeds or `torch.Generator`s derived from the run seed. Evaluation
batches are never augmented.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .errors import IngestionError

DATASET_NAMES = ("cifar10", "cifar100", "folder-of-images")

CIFAR_RESOLUTIONS = (32, 28, 24, 20)
IMAGENET_STYLE_RESOLUTIONS = (224, 192, 160, 128)

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

# per-channel normalization constants applied after scaling to [0, 1]
_CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
_CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class ResolutionSet:
    """Ordered descending resolutions a backbone is trained and served at."""

    values: tuple[int, ...]

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ValueError("resolution set must be non-empty")
        if any(v < 1 for v in vals):
            raise ValueError("resolutions must be positive")
        if list(vals) != sorted(set(vals), reverse=True):
            raise ValueError("resolutions must be strictly decreasing")

    @property
    def base(self) -> int:
        return self.values[0]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


class TensorImageDataset(Dataset):
    """In-memory images (N, C, H, W) float32 plus integer labels."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, classes: list[str]):
        if images.shape[0] != labels.shape[0]:
            raise ValueError("images and labels must align")
        self.images = images
        self.labels = labels
        self.classes = classes

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, idx):
        return self.images[idx], int(self.labels[idx])

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class DatasetSplits:
    train: TensorImageDataset
    val: TensorImageDataset
    test: TensorImageDataset
    meta: dict


def load_dataset(
    name: str,
    root,
    seed: int = 0,
    val_fraction: float = 0.1,
    download: bool = False,
) -> DatasetSplits:
    """Load a dataset and produce disjoint, seed-deterministic splits.

    For the CIFAR datasets the official test set is kept as `test` and the
    validation set is held out of the training images. `folder-of-images`
    expects `root/<class_name>/*.png` and is split 80/10/10.
    """
    if name not in DATASET_NAMES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    root = Path(root)
    if name in ("cifar10", "cifar100"):
        return _load_cifar(name, root, seed, val_fraction, download)
    return _load_folder(root, seed)


def _load_cifar(name, root, seed, val_fraction, download) -> DatasetSplits:
    import torchvision

    cls = torchvision.datasets.CIFAR10 if name == "cifar10" else torchvision.datasets.CIFAR100
    try:
        train_raw = cls(str(root), train=True, download=download)
        test_raw = cls(str(root), train=False, download=download)
    except RuntimeError as exc:
        raise IngestionError(f"{name} not available under {root}: {exc}") from exc

    mean = torch.tensor(_CIFAR_MEAN).view(3, 1, 1)
    std = torch.tensor(_CIFAR_STD).view(3, 1, 1)

    def to_tensor(ds):
        images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float() / 255.0
        images = (images - mean) / std
        labels = torch.tensor(ds.targets, dtype=torch.long)
        return images, labels

    train_images, train_labels = to_tensor(train_raw)
    test_images, test_labels = to_tensor(test_raw)
    classes = list(train_raw.classes)

    n = train_images.shape[0]
    n_val = int(round(n * val_fraction))
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    splits = DatasetSplits(
        train=TensorImageDataset(train_images[train_idx], train_labels[train_idx], classes),
        val=TensorImageDataset(train_images[val_idx], train_labels[val_idx], classes),
        test=TensorImageDataset(test_images, test_labels, classes),
        meta={
            "name": name,
            "root": str(root),
            "seed": seed,
            "val_fraction": val_fraction,
            "sizes": {"train": len(train_idx), "val": len(val_idx), "test": test_images.shape[0]},
        },
    )
    return splits


def _load_folder(root, seed) -> DatasetSplits:
    from PIL import Image

    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"no class directories under {root}")
    classes = [p.name for p in class_dirs]

    images, labels = [], []
    shape = None
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
        for f in files:
            try:
                arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
            except Exception as exc:
                raise IngestionError(f"cannot read image {f}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise IngestionError(
                    f"image {f} has shape {arr.shape}, expected {shape}"
                )
            images.append(torch.from_numpy(arr).permute(2, 0, 1))
            labels.append(label)
    if not images:
        raise IngestionError(f"no images found under {root}")

    images = (torch.stack(images) - 0.5) / 0.5
    labels = torch.tensor(labels, dtype=torch.long)
    n = images.shape[0]
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    n_test = max(1, int(round(n * 0.1)))
    n_val = max(1, int(round(n * 0.1)))
    test_idx = perm[:n_test]
    val_idx = perm[n_test : n_test + n_val]
    train_idx = perm[n_test + n_val :]

    return DatasetSplits(
        train=TensorImageDataset(images[train_idx], labels[train_idx], classes),
        val=TensorImageDataset(images[val_idx], labels[val_idx], classes),
        test=TensorImageDataset(images[test_idx], labels[test_idx], classes),
        meta={
            "name": "folder-of-images",
            "root": str(root),
            "seed": seed,
            "sizes": {"train": len(train_idx), "val": len(val_idx), "test": len(test_idx)},
        },
    )


def make_loader(
    dataset: Dataset,
    batch_size: int,
    shuffle: bool,
    seed: int = 0,
) -> DataLoader:
    gen = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(
        dataset, batch_size=batch_size, shuffle=shuffle, generator=gen, num_workers=0
    )


def augment_batch(images: torch.Tensor, gen: torch.Generator, padding: int = 4) -> torch.Tensor:
    """Random crop (after reflect padding) plus horizontal flip, batched.

    Augmentation randomness comes entirely from `gen`, so runs seeded alike
    see identical crops.
    """
    n, _, h, w = images.shape
    padded = F.pad(images, (padding,) * 4, mode="reflect")
    tops = torch.randint(0, 2 * padding + 1, (n,), generator=gen)
    lefts = torch.randint(0, 2 * padding + 1, (n,), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(images)
    for i in range(n):
        crop = padded[i, :, tops[i] : tops[i] + h, lefts[i] : lefts[i] + w]
        out[i] = torch.flip(crop, dims=(2,)) if flips[i] else crop
    return out


def make_multires_batch(
    images: torch.Tensor, base_resolution: int, targets
) -> dict[int, torch.Tensor]:
    """Bilinear downsamplings of one batch, keyed by resolution.

    The batch must already be at `base_resolution`; the base entry is the
    input tensor itself (no resampling), so every resolution shows the same
    underlying image content.
    """
    target_list = list(targets)
    if base_resolution < max(target_list):
        raise ValueError(
            f"targets {target_list} exceed base resolution {base_resolution}"
        )
    if images.shape[-2:] != (base_resolution, base_resolution):
        raise ValueError(
            f"batch is {tuple(images.shape[-2:])}, expected {base_resolution} square"
        )
    out = {}
    for r in target_list:
        if r == base_resolution:
            out[r] = images
        else:
            out[r] = F.interpolate(
                images, size=(r, r), mode="bilinear", align_corners=False
            )
    return out
