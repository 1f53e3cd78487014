"""Synthetic Gaussian-cluster "images": each class is a random token pattern
plus isotropic noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class DataConfig:
    num_train: int = 480
    num_test: int = 240
    num_aux: int = 256
    separation: float = 1.0
    noise: float = 1.0
    # 0 = task patterns equal the pretraining ones, 1 = unrelated
    task_shift: float = 0.3

    def __post_init__(self):
        if min(self.num_train, self.num_test, self.num_aux) < 1:
            raise ValueError("dataset sizes must be positive")
        if self.separation < 0 or not self.noise > 0:
            raise ValueError("separation must be >= 0 and noise > 0")
        if not 0.0 <= self.task_shift <= 1.0:
            raise ValueError("task_shift must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # (N, seq_len, patch_dim)
    y: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])


def class_means(num_classes: int, seq_len: int, patch_dim: int, separation: float, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return separation * rng.normal(size=(num_classes, seq_len, patch_dim))


def gaussian_clusters(n: int, means: np.ndarray, noise: float, seed) -> Dataset:
    """n samples with balanced labels (round robin, then shuffled)."""
    rng = np.random.default_rng(seed)
    k = means.shape[0]
    y = rng.permutation(np.arange(n) % k)
    x = means[y] + noise * rng.normal(size=(n,) + means.shape[1:])
    return Dataset(x=x, y=y.astype(np.int64))


def task_means(cfg: DataConfig, num_classes: int, seq_len: int, patch_dim: int, seed: int) -> np.ndarray:
    """Pretraining patterns rotated toward fresh ones by ``task_shift``; the norm is kept."""
    s = cfg.task_shift
    base = class_means(num_classes, seq_len, patch_dim, cfg.separation, [seed, 4])
    fresh = class_means(num_classes, seq_len, patch_dim, cfg.separation, [seed, 1])
    return np.sqrt(1.0 - s * s) * base + s * fresh


def task_datasets(cfg: DataConfig, num_classes: int, seq_len: int, patch_dim: int, seed: int):
    """(train, test) for the downstream task; both share the class means."""
    means = task_means(cfg, num_classes, seq_len, patch_dim, seed)
    return (
        gaussian_clusters(cfg.num_train, means, cfg.noise, [seed, 2]),
        gaussian_clusters(cfg.num_test, means, cfg.noise, [seed, 3]),
    )


def auxiliary_dataset(cfg: DataConfig, num_classes: int, seq_len: int, patch_dim: int, seed: int) -> Dataset:
    """Server-side pretraining data; the task's patterns are a shifted copy of these."""
    means = class_means(num_classes, seq_len, patch_dim, cfg.separation, [seed, 4])
    return gaussian_clusters(cfg.num_aux, means, cfg.noise, [seed, 5])


def balanced_accuracy(y_true, y_pred, num_classes: int = None) -> float:
    """Mean per-class recall over classes present in y_true."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    classes = np.unique(y_true) if num_classes is None else [c for c in range(num_classes) if np.any(y_true == c)]
    return float(np.mean([np.mean(y_pred[y_true == c] == c) for c in classes]))
