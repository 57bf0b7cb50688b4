from dataclasses import dataclass
import hashlib
import logging
import os
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from vitkd.util.errors import ConfigError, ShapeError
from vitkd.util.pipeline import PipelineCache

# Procedural pattern per class id, in this order
PATTERN_NAMES = ("bars_horizontal", "bars_vertical", "bars_diagonal", "bars_antidiagonal",
                 "checker_fine", "checker_coarse", "disk", "ring", "cross", "gradient")

# Pixel offset drawn uniformly from [-JITTER, JITTER] per axis and sample
JITTER = 1


@dataclass
class Dataset:
    """
    Labeled images in [0, 1], [B, 3, S, S] float32, with integer class ids
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(F"dataset images must be [B, 3, S, S], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(F"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.split, self.num_classes)


@dataclass(frozen=True)
class DataConfig:
    """
    Where the train/test splits come from
    """

    source: str = "synthetic"
    train_seed: int = 1
    test_seed: int = 2
    train_per_class: int = 500
    test_per_class: int = 100
    classes: int = 10
    image_size: int = 32
    noise: float = 0.1
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def validate(self) -> None:
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(F"data.source must be 'synthetic' or 'idx', got {self.source!r}")
        if not 1 <= self.classes <= len(PATTERN_NAMES) and self.source == "synthetic":
            raise ConfigError(F"data.classes must lie in [1, {len(PATTERN_NAMES)}]")
        if self.source == "synthetic":
            if self.train_seed == self.test_seed:
                raise ConfigError("data: train_seed and test_seed must differ")
            if self.train_per_class < 1 or self.test_per_class < 1:
                raise ConfigError("data: per-class sample counts must be >= 1")
        if self.source == "idx" and None in (self.train_images, self.train_labels,
                                             self.test_images, self.test_labels):
            raise ConfigError("data: idx source needs train/test image and label paths")
        if self.noise < 0 or self.image_size < 4:
            raise ConfigError("data: noise must be >= 0 and image_size >= 4")


def _pattern(kind: int, size: int, dx: int, dy: int) -> np.ndarray:
    """
    :return: [size, size] intensity map in [0, 1]
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xx, yy = xx + dx, yy + dy
    center = (size - 1) / 2.0
    stripe = max(1, size // 8)
    radius = np.hypot(xx - center, yy - center)
    builders: Dict[int, Callable[[], np.ndarray]] = {
        0: lambda: (yy // stripe) % 2,
        1: lambda: (xx // stripe) % 2,
        2: lambda: ((xx + yy) // stripe) % 2,
        3: lambda: ((xx - yy + size) // stripe) % 2,
        4: lambda: ((yy // max(1, size // 16)) + (xx // max(1, size // 16))) % 2,
        5: lambda: ((yy // max(1, size // 4)) + (xx // max(1, size // 4))) % 2,
        6: lambda: radius < size / 4.0,
        7: lambda: np.abs(radius - size * 0.32) < size / 16.0,
        8: lambda: (np.abs(xx - center) < size / 12.0) | (np.abs(yy - center) < size / 12.0),
        9: lambda: np.clip(xx / (size - 1), 0.0, 1.0),
    }
    return builders[kind]().astype(np.float64)


def synth_generate(seed: int, n_per_class: int, classes: int = 10, size: int = 32,
                   noise: float = 0.1, split: str = "train") -> Dataset:
    """
    Balanced procedural dataset: one pattern per class, each sample with a
    positional jitter, a per-channel tint and Gaussian pixel noise, clipped to [0, 1]
    :param seed: fixes every random draw
    :param n_per_class: samples per class
    :param classes: number of classes (at most the number of patterns)
    :param size: image side in pixels
    :param noise: noise standard deviation
    :param split: split tag
    """
    if not 1 <= classes <= len(PATTERN_NAMES):
        raise ConfigError(F"synthetic data has {len(PATTERN_NAMES)} patterns, "
                          F"{classes} classes requested")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.empty((len(labels), 3, size, size), dtype=np.float32)
    for index, label in enumerate(labels):
        dx, dy = rng.integers(-JITTER, JITTER + 1, size=2)
        base = _pattern(int(label), size, int(dx), int(dy))
        tint = rng.uniform(0.7, 1.0, size=3)
        sample = base[None] * tint[:, None, None] + rng.normal(0.0, noise, (3, size, size))
        images[index] = np.clip(sample, 0.0, 1.0)
    return Dataset(images=images, labels=labels.astype(np.int64), split=split,
                   num_classes=classes)


def channel_stats(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    :param images: [B, 3, S, S]
    :return: per-channel mean and std (std floored to stay invertible)
    """
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(images.std(axis=(0, 2, 3), dtype=np.float64), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


def _load_splits(cfg: DataConfig,
                 signature: Tuple[Optional[str], ...] = ()) -> Tuple[Dataset, Dataset]:
    # signature only keys the cache entry
    if cfg.source == "idx":
        from vitkd.module.data.idx_loader import idx_load

        train = idx_load(cfg.train_images, cfg.train_labels, cfg.image_size, "train", cfg.classes)
        test = idx_load(cfg.test_images, cfg.test_labels, cfg.image_size, "test", cfg.classes)
    else:
        train = synth_generate(cfg.train_seed, cfg.train_per_class, cfg.classes,
                               cfg.image_size, cfg.noise, "train")
        test = synth_generate(cfg.test_seed, cfg.test_per_class, cfg.classes,
                              cfg.image_size, cfg.noise, "test")
    logging.info("Loaded %d train and %d test samples (%s)", len(train), len(test), cfg.source)
    return train, test


def _idx_signature(cfg: DataConfig) -> Tuple[Optional[str], ...]:
    """
    :return: md5 of every IDX file (None when missing), empty for synthetic data
    """
    if cfg.source != "idx":
        return ()
    digests = []
    for path in (cfg.train_images, cfg.train_labels, cfg.test_images, cfg.test_labels):
        if path is None or not os.path.isfile(path):
            digests.append(None)
            continue
        digest = hashlib.md5()
        with open(path, "rb") as fin:
            for chunk in iter(lambda: fin.read(1 << 20), b""):
                digest.update(chunk)
        digests.append(digest.hexdigest())
    return tuple(digests)


def load_splits(cfg: DataConfig) -> Tuple[Dataset, Dataset]:
    """
    Build (or fetch from the pipeline cache) the train and test splits
    :param cfg: data config
    :return: train split and test split
    """
    cfg.validate()
    return PipelineCache.memory.cache(_load_splits)(cfg, _idx_signature(cfg))
