"""Seeded synthetic image-classification toy set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def num_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max())) + 1


# (row, column) frequency direction of each class's stripe pattern
_DIRECTIONS = [(1, 0), (0, 1), (1, 1), (1, -1)]


def _sample(rng, n, size, channels, num_classes, noise):
    labels = rng.integers(0, num_classes, n)
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    freq = rng.integers(1, 3, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    dirs = np.array([_DIRECTIONS[c % len(_DIRECTIONS)] for c in labels])
    arg = (dirs[:, 0, None, None] * i + dirs[:, 1, None, None] * j) * freq[:, None, None] * 2 * np.pi / size
    pattern = np.sin(arg + phase[:, None, None])
    if num_classes > len(_DIRECTIONS):
        # extra classes: square wave of the same direction
        square = labels >= len(_DIRECTIONS)
        pattern[square] = np.sign(pattern[square])
    gains = rng.uniform(0.5, 1.5, (n, channels))
    x = pattern[..., None] * gains[:, None, None, :] + rng.normal(0.0, noise, (n, size, size, channels))
    return x, labels


def make_toy_dataset(seed: int = 0, n_train: int = 2000, n_val: int = 500, size: int = 8, channels: int = 4,
                     num_classes: int = 4, noise: float = 0.6) -> Dataset:
    """Oriented sinusoidal stripes with random frequency, phase and channel gains.

    Random phase makes the classes hard to separate with a linear map on
    raw pixels, so non-identity candidates pay off in accuracy.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("dataset splits must be nonempty")
    rng = np.random.default_rng(seed)
    xt, yt = _sample(rng, n_train, size, channels, num_classes, noise)
    xv, yv = _sample(rng, n_val, size, channels, num_classes, noise)
    return Dataset(xt, yt, xv, yv)
