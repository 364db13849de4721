"""
Image datasets: CIFAR-10 binary files, desk-scale subsets and synthetic blobs.

Pixels are always plain byte/255 values in [0, 1] so attack budgets such as
8/255 are in pixel units.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from errors import ContractError, DataFormatError, LabelRangeError
from tape import avg_pool2d

log = structlog.get_logger()

CIFAR_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + int(np.prod(CIFAR_SHAPE))  # 3073
CIFAR_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass
class LabeledImageSet:
    """Read-only (N, C, H, W) images in [0, 1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self) -> None:
        images = np.array(self.images, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got shape {images.shape}")
        if len(images) != len(labels) or labels.ndim != 1:
            raise ContractError(f"{len(images)} images but labels of shape {labels.shape}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ContractError("pixel values must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images, self.labels = images, labels

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.images).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        return digest.hexdigest()

    def class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def subset(self, index: Union[Sequence[int], np.ndarray], name: Optional[str] = None) -> "LabeledImageSet":
        index = np.asarray(index)
        return LabeledImageSet(self.images[index], self.labels[index], self.num_classes, name or self.name)

    def head(self, n: int) -> "LabeledImageSet":
        return self.subset(np.arange(min(n, len(self))))

    def split(self, n_first: int) -> Tuple["LabeledImageSet", "LabeledImageSet"]:
        idx = np.arange(len(self))
        return self.subset(idx[:n_first], f"{self.name}-a"), self.subset(idx[n_first:], f"{self.name}-b")

    def astype(self, dtype: np.dtype) -> "LabeledImageSet":
        return LabeledImageSet(self.images.astype(dtype), self.labels, self.num_classes, self.name)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None
                ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Mini-batches in order, or in an ``rng`` permutation."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


# --------------------------------------------------------------------------
# CIFAR-10 binary layout
# --------------------------------------------------------------------------

def load_cifar10_binary(path: Union[str, Path], dtype: np.dtype = np.float32) -> LabeledImageSet:
    """Parse [1 label byte][1024 R][1024 G][1024 B] records."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) % RECORD_BYTES:
        raise DataFormatError(f"{path.name}: {len(data)} bytes is not a multiple of {RECORD_BYTES}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        record = int(bad[0])
        raise LabelRangeError(f"{path.name}: record {record} has label byte {labels[record]}", record=record)
    images = raw[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(dtype) / np.asarray(255, dtype=dtype)
    log.info("cifar-10 file loaded", path=str(path), records=len(labels))
    return LabeledImageSet(images, labels, CIFAR_CLASSES, path.stem)


def load_cifar10_dir(directory: Union[str, Path], dtype: np.dtype = np.float32
                     ) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """(train, test) from the five training batches and the test batch."""
    directory = Path(directory)
    parts = [load_cifar10_binary(directory / name, dtype) for name in TRAIN_FILES]
    train = LabeledImageSet(np.concatenate([p.images for p in parts]),
                            np.concatenate([p.labels for p in parts]), CIFAR_CLASSES, "cifar10-train")
    test = load_cifar10_binary(directory / TEST_FILE, dtype)
    return train, test


def write_cifar10_binary(dataset: LabeledImageSet, path: Union[str, Path]) -> Path:
    """Export a 3x32x32 set with labels below 10 in the CIFAR-10 binary layout."""
    if dataset.shape != CIFAR_SHAPE:
        raise ContractError(f"only {CIFAR_SHAPE} images can be exported, got {dataset.shape}")
    if len(dataset) and dataset.labels.max() >= CIFAR_CLASSES:
        raise ContractError("labels must be below 10 for the CIFAR-10 layout")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    path = Path(path)
    path.write_bytes(records.tobytes())
    return path


def downsample(images: np.ndarray, extent: int) -> np.ndarray:
    """Chain of 2x2 average pools until the spatial extent equals ``extent``."""
    current = images.shape[-1]
    while current > extent and current % 2 == 0:
        images = avg_pool2d(images, 2)
        current //= 2
    if current != extent:
        raise ContractError(f"cannot reach extent {extent} from {images.shape[-1]} by halving")
    return images


def subset_and_downsample(dataset: LabeledImageSet, classes: Sequence[int], per_class: int,
                          extent: int, seed: int = 0) -> LabeledImageSet:
    """Pick ``per_class`` samples of each class, downsample, relabel 0..len(classes)-1."""
    if len(set(classes)) != len(classes) or len(classes) < 2:
        raise ContractError(f"need at least two distinct classes, got {list(classes)}")
    if per_class < 1:
        raise ContractError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng(seed)
    picks, labels = [], []
    for new, old in enumerate(classes):
        pool = np.flatnonzero(dataset.labels == old)
        if len(pool) < per_class:
            raise ContractError(f"class {old} has {len(pool)} samples, {per_class} requested")
        picks.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
        labels.append(np.full(per_class, new))
    order = rng.permutation(per_class * len(classes))
    index = np.concatenate(picks)[order]
    images = downsample(dataset.images[index], extent)
    out = LabeledImageSet(images, np.concatenate(labels)[order], len(classes), f"{dataset.name}-subset")
    log.info("subset drawn", classes=list(classes), per_class=per_class, extent=extent, seed=seed)
    return out


# --------------------------------------------------------------------------
# Synthetic blobs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Each class is a coloured Gaussian bump on a grey background.

    Bump centres default to evenly spaced points on a circle of radius
    extent/4 around the image centre.
    """

    num_classes: int = 2
    per_class: int = 200
    extent: int = 16
    channels: int = 3
    noise: float = 0.05
    amplitude: float = 0.4
    width: float = 2.5
    centers: Optional[Tuple[Tuple[float, float], ...]] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.noise < 0:
            raise ContractError(f"noise must be non-negative, got {self.noise}")
        if self.extent < 4:
            raise ContractError(f"extent must be at least 4, got {self.extent}")
        if self.per_class < 1 or self.channels < 1 or self.width <= 0:
            raise ContractError("per_class, channels and width must be positive")
        if self.centers is not None and len(self.centers) != self.num_classes:
            raise ContractError(f"{len(self.centers)} centres given for {self.num_classes} classes")

    def resolved_centers(self) -> List[Tuple[float, float]]:
        if self.centers is not None:
            return [tuple(c) for c in self.centers]
        mid, radius = (self.extent - 1) / 2, self.extent / 4
        angles = 2 * np.pi * np.arange(self.num_classes) / self.num_classes
        return [(mid + radius * np.sin(a), mid + radius * np.cos(a)) for a in angles]


def blob_patterns(cfg: SyntheticConfig) -> np.ndarray:
    """(num_classes, C, E, E) noise-free class images."""
    grid = np.arange(cfg.extent, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    patterns = np.empty((cfg.num_classes, cfg.channels, cfg.extent, cfg.extent))
    for c, (cy, cx) in enumerate(cfg.resolved_centers()):
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.width ** 2))
        for ch in range(cfg.channels):
            sign = 1.0 if (c + ch) % 2 == 0 else -1.0
            patterns[c, ch] = 0.5 + sign * cfg.amplitude * bump
    return np.clip(patterns, 0.0, 1.0)


def synth_blobs(cfg: SyntheticConfig = SyntheticConfig(), dtype: np.dtype = np.float32) -> LabeledImageSet:
    rng = np.random.default_rng(cfg.seed)
    labels = rng.permutation(np.repeat(np.arange(cfg.num_classes), cfg.per_class))
    images = blob_patterns(cfg)[labels]
    if cfg.noise > 0:
        images = images + cfg.noise * rng.standard_normal(images.shape)
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    return LabeledImageSet(images, labels, cfg.num_classes, "synth")


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random crop from a reflect-padded image plus a random horizontal flip."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
