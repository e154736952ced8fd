"""Synthetic labeled datasets with train/test/holdout split tags."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

SPLITS = ("train", "test", "holdout")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (m, n) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")
        if self.split is None:
            self.split = np.full(len(self.labels), "train")
        self.split = np.asarray(self.split, dtype="<U7")
        if not set(np.unique(self.split)) <= set(SPLITS):
            raise ValueError(f"split tags must be drawn from {SPLITS}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, split: str) -> "LabeledDataset":
        mask = self.split == split
        if not mask.any():
            raise ValueError(f"split {split!r} is empty")
        return LabeledDataset(self.features[mask], self.labels[mask], self.n_classes,
                              self.split[mask])

    def take(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.n_classes, self.split[idx])

    def with_features(self, features) -> "LabeledDataset":
        return LabeledDataset(np.array(features, dtype=np.float64), self.labels.copy(),
                              self.n_classes, self.split.copy())

    def class_counts(self, split: str | None = None) -> np.ndarray:
        labels = self.labels if split is None else self.labels[self.split == split]
        return np.bincount(labels, minlength=self.n_classes)

    def to_csv(self, features_path, labels_path=None) -> None:
        np.savetxt(features_path, self.features, delimiter=",", fmt="%.17g")
        if labels_path is not None:
            np.savetxt(labels_path, self.labels, fmt="%d")

    @classmethod
    def from_csv(cls, features_path, labels_path=None, n_classes=None) -> "LabeledDataset":
        x = np.loadtxt(features_path, delimiter=",", ndmin=2, dtype=np.float64)
        if labels_path is None:
            y = np.zeros(len(x), dtype=np.int64)
        else:
            y = np.loadtxt(labels_path, dtype=np.int64, ndmin=1)
        k = n_classes if n_classes is not None else int(y.max()) + 1 if y.size else 1
        return cls(x, y, max(k, 1))


def _simplex_means(k: int, n: int, separation: float, rng) -> np.ndarray:
    """K points with pairwise distance ``separation``, rotated into a random
    dense direction of R^n."""
    if n >= k:
        base = np.eye(k) - 1.0 / k
        emb = np.zeros((k, n))
        emb[:, :k] = base * (separation / np.sqrt(2.0))
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        return emb @ q.T
    means = rng.standard_normal((k, n))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    return means * separation / np.sqrt(2.0)


def _split_tags(labels, k, test_fraction, holdout_fraction, rng) -> np.ndarray:
    tags = np.full(len(labels), "train", dtype="<U7")
    for c in range(k):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = max(1, int(round(test_fraction * len(idx))))
        n_hold = max(1, int(round(holdout_fraction * len(idx)))) if holdout_fraction > 0 else 0
        if n_test + n_hold >= len(idx):
            raise ValueError(f"class {c} too small for the requested splits")
        tags[idx[:n_test]] = "test"
        tags[idx[n_test:n_test + n_hold]] = "holdout"
    return tags


def make_synthetic(kind: str = "gaussian-blobs", n_classes: int = 3, n_features: int = 10,
                   n_samples: int = 900, separation: float = 4.0, seed: int = 0,
                   test_fraction: float = 0.3, holdout_fraction: float = 0.0) -> LabeledDataset:
    """Balanced K-class data with unit-variance noise.

    ``gaussian-blobs``: class means form a regular simplex whose edge length
    is ``separation`` noise standard deviations.
    ``concentric-rings``: class ``c`` lies on a ring of radius
    ``1 + c * separation`` in a random 2-D plane.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_samples < 10 * n_classes:
        raise ValueError(f"need at least {10 * n_classes} samples for {n_classes} classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % n_classes
    labels = labels[rng.permutation(n_samples)]
    if kind == "gaussian-blobs":
        means = _simplex_means(n_classes, n_features, separation, rng)
        x = means[labels] + rng.standard_normal((n_samples, n_features))
    elif kind == "concentric-rings":
        if n_features < 2:
            raise ValueError("rings need at least two features")
        angle = rng.uniform(0, 2 * np.pi, n_samples)
        radius = 1.0 + labels * separation
        plane = np.linalg.qr(rng.standard_normal((n_features, 2)))[0]
        ring = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        x = ring @ plane.T + 0.25 * rng.standard_normal((n_samples, n_features))
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    tags = _split_tags(labels, n_classes, test_fraction, holdout_fraction, rng)
    return LabeledDataset(x, labels, n_classes, tags)


def write_dataset(ds: LabeledDataset, out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    fx, fy = out_dir / f"{stem}_features.csv", out_dir / f"{stem}_labels.csv"
    ds.to_csv(fx, fy)
    return fx, fy
