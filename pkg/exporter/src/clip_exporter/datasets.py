"""Dataset providers: labeled images as float arrays in [0, 1].

A provider exposes ``class_names`` and ``split(name)`` returning
(images, labels) with images shaped (N, H, W, 3). Heavyweight imports
happen lazily so the exporter can be driven by a stub in tests.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class SetupMissing(Exception):
    """Raised when a dataset or model is not available locally."""


class Cifar10Dataset:
    """CIFAR-10 via torchvision; requires the archive locally unless download=True."""

    def __init__(self, root: str = "data", download: bool = False):
        try:
            from torchvision.datasets import CIFAR10
        except ImportError as exc:
            raise SetupMissing(f"torchvision is not installed: {exc}") from exc
        try:
            self._train = CIFAR10(root=root, train=True, download=download)
            self._test = CIFAR10(root=root, train=False, download=download)
        except (RuntimeError, OSError) as exc:
            raise SetupMissing(f"CIFAR-10 data not available under {root!r}: {exc}") from exc
        self.class_names = list(self._train.classes)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        ds = {"train": self._train, "test": self._test}[name]
        images = np.asarray(ds.data, dtype=np.float64) / 255.0
        labels = np.asarray(ds.targets, dtype=np.int64)
        return images, labels


class ImageFolderDataset:
    """<root>/<split>/<class_name>/*.png|jpg, classes sorted by name."""

    def __init__(self, root: str, image_size: int = 224):
        self.root = Path(root)
        if not self.root.exists():
            raise SetupMissing(f"image folder {root!r} does not exist")
        try:
            from PIL import Image  # noqa: F401
        except ImportError as exc:
            raise SetupMissing(f"Pillow is not installed: {exc}") from exc
        self.image_size = image_size
        first_split = next((p for p in sorted(self.root.iterdir()) if p.is_dir()), None)
        if first_split is None:
            raise SetupMissing(f"no split directories under {root!r}")
        self.class_names = sorted(p.name for p in first_split.iterdir() if p.is_dir())

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        from PIL import Image

        split_dir = self.root / name
        if not split_dir.exists():
            raise SetupMissing(f"split directory {split_dir} does not exist")
        images, labels = [], []
        for label, cls in enumerate(self.class_names):
            for file in sorted((split_dir / cls).glob("*")):
                with Image.open(file) as img:
                    img = img.convert("RGB").resize((self.image_size, self.image_size))
                    images.append(np.asarray(img, dtype=np.float64) / 255.0)
                labels.append(label)
        if not images:
            raise SetupMissing(f"no images found under {split_dir}")
        return np.stack(images), np.asarray(labels, dtype=np.int64)


def resolve_dataset(name: str, data_root: str = "data", download: bool = False):
    if name == "cifar10":
        return Cifar10Dataset(root=data_root, download=download)
    if name.startswith("imagefolder:"):
        return ImageFolderDataset(name.split(":", 1)[1])
    raise SetupMissing(f"unknown dataset {name!r}; expected 'cifar10' or 'imagefolder:<path>'")
