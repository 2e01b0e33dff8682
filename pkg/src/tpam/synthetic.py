"""Synthetic datasets with known structure, used by checks and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import BoundingBox
from .train import Dataset


def gaussian_blobs(n: int, seed: int = 0, sigma: float = 0.5, separation: float = 6.0) -> Dataset:
    """Two isotropic blobs in R^2 whose centres are ``separation * sigma`` apart."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    centres = np.array([[-0.5, -0.5], [0.5, 0.5]]) * separation * sigma / np.sqrt(0.5)
    x = centres[labels] + rng.normal(0.0, sigma, size=(n, 2))
    return Dataset(x, labels, num_classes=2)


@dataclass(frozen=True)
class PlantedTask:
    """Images with a bright square planted at ``region`` for class 1 only.

    ``region`` is (row, col, height, width) in pixels.
    """

    shape: tuple[int, int, int] = (1, 16, 16)
    region: tuple[int, int, int, int] = (4, 6, 4, 4)
    amplitude: float = 1.0
    noise: float = 0.15

    @property
    def bbox(self) -> BoundingBox:
        r, c, h, w = self.region
        return BoundingBox("planted", c, r, c + w, r + h)

    def truth(self) -> np.ndarray:
        """Ground-truth (H, W) saliency: 1 on the planted square, 0 elsewhere."""
        r, c, h, w = self.region
        m = np.zeros(self.shape[-2:])
        m[r : r + h, c : c + w] = 1.0
        return m

    def sample(self, n: int, seed: int, label=None) -> Dataset:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n) if label is None else np.full(n, int(label))
        x = np.abs(rng.normal(0.0, self.noise, size=(n,) + self.shape))
        x[labels == 1] += self.amplitude * self.truth()
        return Dataset(np.clip(x, 0.0, None), labels, num_classes=2)


@dataclass(frozen=True)
class PlantedFeatureMaps:
    """Sparse nonnegative (C, H, W) maps; class 1 lights up a 2x2 cell block.

    Mimics post-ReLU activations: background is rectified noise, the planted
    block adds ``amplitude`` to every channel in ``signal_channels``.
    """

    shape: tuple[int, int, int] = (4, 8, 8)
    cell: tuple[int, int] = (2, 5)
    amplitude: float = 1.0
    noise: float = 0.1
    signal_channels: tuple[int, ...] = (0, 1)

    def truth(self) -> np.ndarray:
        m = np.zeros(self.shape[-2:])
        r, c = self.cell
        m[r : r + 2, c : c + 2] = 1.0
        return m

    def sample(self, n: int, seed: int, label=None) -> Dataset:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n) if label is None else np.full(n, int(label))
        x = np.maximum(rng.normal(0.0, self.noise, size=(n,) + self.shape), 0.0)
        for ch in self.signal_channels:
            x[labels == 1, ch] += self.amplitude * self.truth()
        return Dataset(x, labels, num_classes=2)
