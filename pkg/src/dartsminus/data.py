"""Synthetic image classification data and dataset splitting.

The default generator draws 8x8 single-channel images of concentric rings.
The class is the radial frequency of the rings; each image gets a random
center, phase and additive noise, is standardized to zero mean and unit
variance, and sits inside a one-pixel zero frame. The frame makes every
shifted window sum of an image equal its (zero) total, so any network that
is linear in the input up to a global average pool sees constant features
and scores exactly chance, while a single ReLU conv layer separates the
classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticDataset:
    kind: str = "concentric"
    num_classes: int = 4
    size: int = 8
    samples_per_class: int = 256
    noise: float = 0.1
    freq_range: tuple[float, float] = (1.0, 2.8)  # radial frequencies, radians per pixel
    center_jitter: float = 0.5  # max offset of the ring center from the image center
    seed: int = 0

    def generate(self) -> tuple[np.ndarray, np.ndarray]:
        """Images ``(N, 1, size, size)`` and integer labels, class-balanced and seed-determined."""
        if self.kind != "concentric":
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        rng = np.random.default_rng(self.seed)
        n = self.num_classes * self.samples_per_class
        labels = np.repeat(np.arange(self.num_classes), self.samples_per_class)
        labels = labels[rng.permutation(n)]

        inner = self.size - 2
        coords = np.arange(inner) - (inner - 1) / 2.0
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        center = rng.uniform(-self.center_jitter, self.center_jitter, size=(n, 2))
        phase = rng.uniform(0, 2 * np.pi, size=n)
        # radial frequencies spread between slow rings and near-Nyquist
        freqs = np.linspace(*self.freq_range, self.num_classes)[labels]
        r = np.hypot(yy[None] - center[:, 0, None, None], xx[None] - center[:, 1, None, None])
        img = np.cos(freqs[:, None, None] * r + phase[:, None, None])
        img = img + self.noise * rng.standard_normal(img.shape)
        img = img - img.mean(axis=(1, 2), keepdims=True)
        img = img / (img.std(axis=(1, 2), keepdims=True) + 1e-12)
        framed = np.zeros((n, 1, self.size, self.size))
        framed[:, 0, 1:-1, 1:-1] = img
        return framed, labels.astype(np.int64)


def split_dataset(
    x: np.ndarray, y: np.ndarray, ratio: float, seed: int
) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Disjoint, label-stratified, seed-deterministic split.

    Each class contributes ``round(ratio * count)`` samples to the first split.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("split ratio must lie in (0, 1)")
    if len(x) != len(y):
        raise ValueError("inputs and labels differ in length")
    if len(y) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(ratio * len(idx)))
        if cut == 0 or cut == len(idx):
            raise ValueError(f"class {c} would be absent from one split")
        first.append(idx[:cut])
        second.append(idx[cut:])
    a = np.sort(np.concatenate(first))
    b = np.sort(np.concatenate(second))
    return (x[a], y[a]), (x[b], y[b])
