"""Dataset ingestion, deterministic splitting and batching.

Folder datasets follow the class-per-directory layout
``root/<class_name>/*.{jpg,png,tif}``; class indices are assigned in
lexicographic directory order. Splits are stratified per class with the
test share ``floor((1 - ratio) * n)`` and the remainder going to train,
so the per-class test fraction is always within one sample of the global
ratio and the same (root, seed, ratio) triple reproduces the same split
byte for byte.

Loaded batches are (B, H, W, 3) float32 tensors: RGB order, values
divided by 255, then optionally shifted/scaled by per-channel mean/std.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".tif", ".tiff"}


class IngestionError(ValueError):
    """Dataset tree cannot be scanned into a manifest."""


class ImageLoadError(ValueError):
    """A manifest entry exists but cannot be decoded."""


def split_test_count(n: int, ratio: float) -> int:
    """Samples a class of size ``n`` contributes to the test split.

    The small epsilon undoes float artifacts like (1 - 0.8) * 10 landing
    just below 2; exact fractions then floor as intended.
    """
    return int(math.floor((1.0 - ratio) * n + 1e-9))


@dataclass
class DatasetManifest:
    root: str
    classes: list[str]
    samples: list[tuple[str, int]]   # (relative path, class index)
    seed: int
    split_ratio: float

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.samples], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({
            "root": self.root,
            "classes": self.classes,
            "samples": [[path, idx] for path, idx in self.samples],
            "seed": self.seed,
            "split_ratio": self.split_ratio,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        return cls(
            root=raw["root"],
            classes=list(raw["classes"]),
            samples=[(path, int(idx)) for path, idx in raw["samples"]],
            seed=int(raw["seed"]),
            split_ratio=float(raw["split_ratio"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except Exception as exc:  # PIL raises a zoo of types for bad files
        log.warning("skipping unreadable image %s (%s)", path, exc)
        return False


def scan_and_split(root: str | Path, seed: int,
                   ratio: float = 0.8) -> tuple[DatasetManifest, DatasetManifest]:
    """Scan a class-per-directory tree into deterministic train/test
    manifests via a per-class stratified shuffle."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    if not 0.0 < ratio < 1.0:
        raise IngestionError(f"split ratio must be in (0, 1), got {ratio}")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if len(classes) < 2:
        raise IngestionError(f"need at least 2 class directories under {root}, found {len(classes)}")

    rng = np.random.default_rng(seed)
    train_samples: list[tuple[str, int]] = []
    test_samples: list[tuple[str, int]] = []
    for class_idx, name in enumerate(classes):
        files = sorted(
            p for p in (root / name).iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
        )
        files = [p for p in files if _readable(p)]
        if not files:
            raise IngestionError(f"class directory {name!r} contains no readable images")
        perm = rng.permutation(len(files))
        n_test = split_test_count(len(files), ratio)
        rel = [files[i].relative_to(root).as_posix() for i in perm]
        test_samples.extend((path, class_idx) for path in rel[:n_test])
        train_samples.extend((path, class_idx) for path in rel[n_test:])

    make = lambda samples: DatasetManifest(
        root=str(root), classes=classes, samples=samples, seed=seed, split_ratio=ratio)
    return make(train_samples), make(test_samples)


def _normalize(batch: np.ndarray, mean, std) -> np.ndarray:
    if mean is not None:
        batch = batch - np.asarray(mean, dtype=np.float32).reshape(1, 1, 1, 3)
    if std is not None:
        batch = batch / np.asarray(std, dtype=np.float32).reshape(1, 1, 1, 3)
    return batch


def load_batch(manifest: DatasetManifest, indices, target_hw: tuple[int, int],
               mean=None, std=None) -> tuple[np.ndarray, np.ndarray]:
    """Decode, bilinear-resize and normalize a batch of manifest entries."""
    h, w = target_hw
    images = np.empty((len(indices), h, w, 3), dtype=np.float32)
    labels = np.empty(len(indices), dtype=np.int64)
    root = Path(manifest.root)
    for row, idx in enumerate(indices):
        rel, class_idx = manifest.samples[idx]
        path = root / rel
        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB").resize((w, h), Image.BILINEAR)
        except Exception as exc:
            raise ImageLoadError(f"failed to load {path}: {exc}") from exc
        images[row] = np.asarray(rgb, dtype=np.float32) / 255.0
        labels[row] = class_idx
    return _normalize(images, mean, std), labels


@dataclass
class FolderDataset:
    """Manifest plus the loading knobs the trainer needs."""

    manifest: DatasetManifest
    target_hw: tuple[int, int]
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def class_names(self) -> list[str]:
        return self.manifest.classes

    def load_batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        return load_batch(self.manifest, indices, self.target_hw, self.mean, self.std)


@dataclass
class SyntheticDataset:
    """In-memory dataset; images stored as (M, H, W, 3) float32 in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def target_hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def load_batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices)
        return self.images[idx], self.labels[idx]


def make_synthetic(classes: int, per_class: int, hw: tuple[int, int],
                   seed: int, noise: float = 0.12) -> SyntheticDataset:
    """Deterministic texture dataset: each class is an oriented grating at
    a class-specific angle with per-sample phase/frequency jitter plus
    seeded pixel noise. Easy for a small CNN, not trivially linear."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    h, w = hw
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")

    images = np.empty((classes * per_class, h, w, 3), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    row = 0
    for c in range(classes):
        angle = math.pi * c / classes
        proj = xs * math.cos(angle) + ys * math.sin(angle)
        for _ in range(per_class):
            freq = rng.uniform(3.0, 4.5)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            grating = 0.5 + 0.4 * np.sin(2.0 * math.pi * freq * proj + phase)
            plane = np.clip(grating + rng.normal(0.0, noise, size=(h, w)), 0.0, 1.0)
            images[row] = plane[..., None].astype(np.float32)
            labels[row] = c
            row += 1
    names = [f"class_{c:02d}" for c in range(classes)]
    return SyntheticDataset(images=images, labels=labels, class_names=names)


def split_in_memory(ds: SyntheticDataset, ratio: float,
                    seed: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Stratified train/test split of an in-memory dataset using the same
    per-class counting rule as ``scan_and_split``."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        perm = rng.permutation(len(members))
        n_test = split_test_count(len(members), ratio)
        test_idx.extend(members[perm[:n_test]])
        train_idx.extend(members[perm[n_test:]])
    pick = lambda idx: SyntheticDataset(
        images=ds.images[np.array(idx, dtype=int)],
        labels=ds.labels[np.array(idx, dtype=int)],
        class_names=list(ds.class_names),
    )
    return pick(train_idx), pick(test_idx)
