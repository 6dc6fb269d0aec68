"""Image-folder datasets and the synthetic texture generator.

On-disk layout::

    root/manifest.json
    root/{train,test}/<class_id>/<index>.png
"""
from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .protocol import TaskData

MANIFEST = "manifest.json"
FORMAT = "apgcl-imagefolder"


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticDatasetSpec:
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 32
    channels: int = 3
    seed: int = 0
    noise_std: float = 0.1

    def __post_init__(self):
        if min(self.num_classes, self.train_per_class, self.test_per_class, self.image_size) < 1:
            raise DatasetError("counts and sizes must be positive")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be non-negative")


def _class_pattern(c: int, spec: SyntheticDatasetSpec):
    """Orientation, frequency, phase and colour mix for class ``c``."""
    rng = np.random.default_rng([spec.seed, c])
    theta = np.pi * (c / spec.num_classes) + rng.uniform(-0.1, 0.1)
    freq = rng.uniform(1.5, 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    colour = rng.uniform(-1.0, 1.0, size=spec.channels)
    tint = rng.uniform(-1.0, 1.0, size=spec.channels)
    blob = rng.uniform(0.2, 0.8, size=2)
    return theta, freq, phase, colour, tint, blob


def render(c: int, spec: SyntheticDatasetSpec, rng: np.random.Generator) -> np.ndarray:
    """One (H, W, C) uint8 sample of class ``c``."""
    n = spec.image_size
    theta, freq, phase, colour, tint, blob = _class_pattern(c, spec)
    yy, xx = np.mgrid[0:n, 0:n] / n
    jitter_phase = rng.normal(0, 0.3)
    jitter_amp = rng.uniform(0.8, 1.2)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    wave = np.sin(2 * np.pi * freq * u + phase + jitter_phase)
    spot = np.exp(-((xx - blob[0]) ** 2 + (yy - blob[1]) ** 2) / 0.02)
    tint = tint + rng.normal(0, 0.25, size=tint.shape)
    img = 0.5 + 0.15 * tint + 0.2 * jitter_amp * wave[..., None] * colour + 0.2 * spot[..., None] * colour[::-1]
    img = img + rng.normal(0, spec.noise_std, size=img.shape) if spec.noise_std > 0 else img
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticDatasetSpec, out: str | Path, overwrite: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise DatasetError(f"output directory {out} is not empty (pass overwrite to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    classes = []
    for c in range(spec.num_classes):
        rng = np.random.default_rng([spec.seed, c, 1])
        for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            d = out / split / str(c)
            d.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                arr = render(c, spec, rng)
                mode = "RGB" if spec.channels == 3 else "L"
                Image.fromarray(arr if spec.channels == 3 else arr[..., 0], mode=mode).save(d / f"{i:05d}.png")
        classes.append({"id": c, "train": spec.train_per_class, "test": spec.test_per_class})
    manifest = {
        "format": FORMAT,
        "version": 1,
        "image_size": spec.image_size,
        "channels": spec.channels,
        "classes": classes,
        "num_train": spec.num_classes * spec.train_per_class,
        "num_test": spec.num_classes * spec.test_per_class,
        "synthetic": asdict(spec),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path} is not an {FORMAT} manifest")
    return manifest


class ImageFolderSource:
    """Loads one task's images from disk on request; holds no samples itself."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.image_size = int(self.manifest["image_size"])
        self.channels = int(self.manifest["channels"])
        self.class_ids = [int(c["id"]) for c in self.manifest["classes"]]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def _load(self, split: str, class_ids) -> TaskData:
        images, labels = [], []
        for c in class_ids:
            files = sorted((self.root / split / str(c)).glob("*.png"))
            if not files:
                raise DatasetError(f"no {split} images for class {c}")
            for f in files:
                with Image.open(f) as im:
                    arr = np.asarray(im, dtype=np.uint8)
                if arr.ndim == 2:
                    arr = arr[..., None]
                images.append(arr)
                labels.append(int(c))
        x = np.stack(images).transpose(0, 3, 1, 2).astype(np.float64) / 255.0
        x = (x - 0.5) / 0.5
        return TaskData(
            torch.as_tensor(x, dtype=torch.get_default_dtype()),
            torch.as_tensor(labels, dtype=torch.long),
        )

    def train_split(self, class_ids) -> TaskData:
        return self._load("train", class_ids)

    def test_split(self, class_ids) -> TaskData:
        return self._load("test", class_ids)


def nearest_mean_accuracy(root: str | Path, class_ids=None) -> float:
    """Test accuracy (%) of a nearest-class-mean classifier on raw pixels."""
    src = ImageFolderSource(root)
    class_ids = src.class_ids if class_ids is None else list(class_ids)
    train, test = src.train_split(class_ids), src.test_split(class_ids)
    xtr = train.images.reshape(len(train), -1).double()
    xte = test.images.reshape(len(test), -1).double()
    means = torch.stack([xtr[train.labels == c].mean(0) for c in class_ids])
    pred = torch.tensor(class_ids)[torch.cdist(xte, means).argmin(1)]
    return 100.0 * float((pred == test.labels).double().mean())
