"""Toy datasets: 2-D point clouds, 8x8 synthetic patterns, and IDX image files."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ContractViolation

__all__ = ["DatasetKind", "Dataset", "GMM8_RADIUS", "GMM8_STD"]

GMM8_RADIUS = 2.0
GMM8_STD = 0.1


class DatasetKind(str, Enum):
    TWO_MOONS = "two-moons"
    GAUSS_MIXTURE_8 = "gauss-mixture-8"
    CHECKERBOARD = "checkerboard"
    PATTERNS_8X8 = "synthetic-patterns-8x8"
    EXTERNAL_IDX = "external-idx"


def _two_moons(n, rng, noise):
    labels = rng.integers(0, 2, size=n)
    theta = rng.uniform(0.0, np.pi, size=n)
    outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inner = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    x = np.where(labels[:, None] == 0, outer, inner)
    x = x - np.array([0.5, 0.25]) + noise * rng.standard_normal((n, 2))
    return x, labels


def _gmm8(n, rng):
    labels = rng.integers(0, 8, size=n)
    ang = labels * (np.pi / 4)
    centers = GMM8_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers + GMM8_STD * rng.standard_normal((n, 2)), labels


def _checkerboard(n, rng):
    x = rng.uniform(-2.0, 2.0, size=n)
    # pick a row with the same parity as x's column so every cell is "black"
    row = 2 * rng.integers(0, 2, size=n) + np.floor(x) % 2
    y = -2.0 + row + rng.uniform(0.0, 1.0, size=n)
    return np.stack([x, y], axis=1), np.zeros(n, dtype=int)


def _pattern(kind: int, rng) -> np.ndarray:
    img = np.zeros((8, 8))
    o = rng.integers(1, 7)
    if kind == 0:
        img[o, :] = 1
    elif kind == 1:
        img[:, o] = 1
    elif kind == 2:
        np.fill_diagonal(img, 1)
    elif kind == 3:
        np.fill_diagonal(np.fliplr(img), 1)
    elif kind == 4:
        s = rng.integers(0, 3)
        img[s : 8 - s, s] = img[s : 8 - s, 7 - s] = 1
        img[s, s : 8 - s] = img[7 - s, s : 8 - s] = 1
    elif kind == 5:
        r, c = rng.integers(0, 5, size=2)
        img[r : r + 4, c : c + 4] = 1
    elif kind == 6:
        img[o, :] = 1
        img[:, 7 - o] = 1
    else:
        img[::2, ::2] = img[1::2, 1::2] = 1
    return img


def _patterns(n, rng):
    labels = rng.integers(0, 8, size=n)
    imgs = np.stack([_pattern(int(k), rng) for k in labels]) if n else np.zeros((0, 8, 8))
    level = rng.uniform(0.7, 1.0, size=(n, 1, 1))
    imgs = imgs * level + 0.05 * rng.standard_normal(imgs.shape)
    return np.clip(imgs, 0.0, 1.0), labels


@dataclass
class Dataset:
    """A sampleable toy distribution.

    ``sample(n, rng)`` draws with the caller's generator; without one, a fresh
    generator seeded by ``seed`` is used, so ``Dataset(kind, seed=s).sample(n)``
    is reproducible.
    """

    kind: DatasetKind
    seed: int = 0
    noise: float = 0.05
    idx_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        self._images = None
        self._labels = None
        if self.kind is DatasetKind.EXTERNAL_IDX:
            if not self.idx_path:
                raise ContractViolation("external-idx dataset needs idx_path")
            from .imageio import read_idx

            raw = read_idx(self.idx_path)
            if raw.ndim < 2:
                raise ContractViolation(f"{self.idx_path}: expected an array of samples, got shape {raw.shape}")
            self._images = raw.astype(np.float64) / 255.0
            if self.labels_path:
                self._labels = read_idx(self.labels_path).astype(int)

    @property
    def data_shape(self) -> tuple:
        if self.kind is DatasetKind.PATTERNS_8X8:
            return (8, 8)
        if self.kind is DatasetKind.EXTERNAL_IDX:
            return tuple(self._images.shape[1:])
        return (2,)

    @property
    def is_image(self) -> bool:
        return self.kind in (DatasetKind.PATTERNS_8X8, DatasetKind.EXTERNAL_IDX)

    def sample_labeled(self, n: int, rng: np.random.Generator | None = None):
        if n < 0:
            raise ContractViolation("sample count must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        if self.kind is DatasetKind.TWO_MOONS:
            return _two_moons(n, rng, self.noise)
        if self.kind is DatasetKind.GAUSS_MIXTURE_8:
            return _gmm8(n, rng)
        if self.kind is DatasetKind.CHECKERBOARD:
            return _checkerboard(n, rng)
        if self.kind is DatasetKind.PATTERNS_8X8:
            return _patterns(n, rng)
        idx = rng.integers(0, len(self._images), size=n)
        labels = self._labels[idx] if self._labels is not None else np.zeros(n, dtype=int)
        return self._images[idx], labels

    def sample(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.sample_labeled(n, rng)[0]

    def second_moment(self) -> float:
        """E||x||^2 in closed form where one exists (used as a test oracle)."""
        if self.kind is DatasetKind.GAUSS_MIXTURE_8:
            return GMM8_RADIUS**2 + 2 * GMM8_STD**2
        raise ContractViolation(f"no closed-form second moment for {self.kind.value}")


def load_dataset(kind: str, seed: int = 0, idx_path: str | Path | None = None, labels_path=None) -> Dataset:
    return Dataset(DatasetKind(kind), seed=seed, idx_path=str(idx_path) if idx_path else None,
                   labels_path=str(labels_path) if labels_path else None)
