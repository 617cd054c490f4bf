"""Synthetic blobs, CSV ingestion and IID client partitioning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (n, dims) float64
    labels: np.ndarray  # (n,) int64
    classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a non-empty 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("need exactly one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: tuple[tuple[int, ...], ...]
    test_indices: tuple[int, ...]

    @property
    def sample_counts(self) -> list[int]:
        return [len(c) for c in self.client_indices]


def generate_blobs(classes: int, dims: int, per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters around standard-normal class centres."""
    if classes < 1 or dims < 1 or per_class < 1 or spread < 0:
        raise ValueError("classes, dims, per_class must be positive and spread non-negative")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(classes, dims))
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    features = centers[labels] + spread * rng.normal(0.0, 1.0, size=(labels.size, dims))
    return Dataset(features, labels, classes)


def partition_iid(dataset: Dataset, n_clients: int, test_fraction: float, seed: int) -> PartitionPlan:
    """Shuffle, hold out the test split first, then deal the rest out evenly."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    n = len(dataset)
    n_test = int(round(test_fraction * n))
    if n - n_test < n_clients:
        raise ValueError(f"too few samples: {n - n_test} training samples for {n_clients} clients")
    perm = np.random.default_rng(seed).permutation(n)
    test = perm[:n_test]
    clients = np.array_split(perm[n_test:], n_clients)
    return PartitionPlan(
        tuple(tuple(int(i) for i in c) for c in clients),
        tuple(int(i) for i in test),
    )


def load_csv(path, label_column: str) -> Dataset:
    """Read a headered numeric CSV; every column but ``label_column`` is a feature.

    Labels that are all non-negative integers are used as-is; otherwise the
    distinct label strings are coded 0..k-1 in sorted order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"{path}: no label column {label_column!r} in header {header}")
        li = header.index(label_column)
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(c) for j, c in enumerate(row) if j != li])
            except ValueError:
                raise ValueError(f"{path}: row {lineno} has a non-numeric feature") from None
            raw_labels.append(row[li].strip())
    if not rows:
        raise ValueError(f"{path}: no data rows")
    if all(lbl.isdigit() for lbl in raw_labels):
        labels = np.array([int(lbl) for lbl in raw_labels], dtype=np.int64)
        classes = int(labels.max()) + 1
    else:
        codes = {lbl: i for i, lbl in enumerate(sorted(set(raw_labels)))}
        labels = np.array([codes[lbl] for lbl in raw_labels], dtype=np.int64)
        classes = len(codes)
    return Dataset(np.array(rows, dtype=np.float64), labels, max(classes, 1))


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.dims)] + [label_column])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
