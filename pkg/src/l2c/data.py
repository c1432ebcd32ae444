"""Labeled 2-D Gaussian mixture datasets."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class MixtureSpec:
    modes: int = 8
    radius: float = 2.0
    std: float = 0.1

    def means(self) -> np.ndarray:
        if self.modes == 1:
            return np.array([[self.radius, 0.0]])
        ang = 2.0 * math.pi * np.arange(self.modes) / self.modes
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass
class Dataset:
    labels: np.ndarray  # int64 (n,)
    points: np.ndarray  # float32 (n, 2)

    def __len__(self) -> int:
        return len(self.labels)

    def split(self, frac: float) -> tuple["Dataset", "Dataset"]:
        k = int(round(len(self) * frac))
        return (Dataset(self.labels[:k], self.points[:k]),
                Dataset(self.labels[k:], self.points[k:]))

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size)
        return self.points[idx], self.labels[idx]


def gaussian_mixture(spec: MixtureSpec, n: int, seed: int) -> Dataset:
    if spec.modes < 1:
        raise ValueError("need at least one mode")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, spec.modes, n)
    pts = spec.means()[labels] + spec.std * rng.standard_normal((n, 2))
    return Dataset(labels.astype(np.int64), pts.astype(np.float32))


def write_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "x", "y"])
        for lab, (px, py) in zip(ds.labels, ds.points):
            w.writerow([int(lab), repr(float(px)), repr(float(py))])


def read_csv(path: str | Path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float32)
    return Dataset(labels, pts)
