"""Synthetic datasets, CSV ingestion and k-shot subsampling."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .numcore import RandomStream


@dataclass
class LabeledDataset:
    inputs: np.ndarray   # (n, dim)
    labels: np.ndarray   # (n,) int
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(-1, 1) if self.inputs.size else self.inputs.reshape(0, 0)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, name=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, name or self.name)


def simplex_centers(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Vertices of a regular simplex with pairwise distance ``separation``, zero-padded to dim."""
    k = num_classes
    if dim < max(k - 1, 1):
        raise ValueError(f"dim={dim} too small to place {k} class centers (need >= {max(k - 1, 1)})")
    if k == 1:
        return np.zeros((1, dim))
    E = np.eye(k) - 1.0 / k
    # orthonormal basis of the centered subspace (rank k-1)
    q, _ = np.linalg.qr(E[:, : k - 1])
    coords = E @ q
    coords *= separation / math.sqrt(2.0)
    out = np.zeros((k, dim))
    out[:, : k - 1] = coords
    return out


def gen_blobs(num_classes: int, per_class: int, dim: int, separation: float, noise_sd: float,
              stream: RandomStream) -> LabeledDataset:
    if num_classes < 1 or per_class < 1 or dim < 1:
        raise ValueError("counts and dim must be >= 1")
    if not separation > 0:
        raise ValueError("separation must be positive")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    centers = simplex_centers(num_classes, dim, separation)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = stream.normal((labels.shape[0], dim))
    X = centers[labels] + noise_sd * noise
    return LabeledDataset(X, labels, num_classes, f"blobs{num_classes}x{per_class}")


def gen_two_moons(per_class: int, noise_sd: float, stream: RandomStream) -> LabeledDataset:
    """Upper unit half-circle at the origin (class 0) and a lower one shifted to (1, 0.5) (class 1)."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    t = np.linspace(0.0, math.pi, per_class)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.concatenate([outer, inner])
    X = X + noise_sd * stream.normal(X.shape)
    labels = np.repeat([0, 1], per_class)
    return LabeledDataset(X, labels, 2, f"two_moons{per_class}")


def k_shot_sample(dataset: LabeledDataset, k: int, stream: RandomStream) -> LabeledDataset:
    """Exactly k examples per class without replacement, kept in original order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.shape[0] < k:
            raise ValueError(f"class {c} has {idx.shape[0]} examples, fewer than k={k}")
        # random keys, then keep the k smallest: uniform subset without replacement
        keys = stream.random(idx.shape[0])
        keep.append(idx[np.sort(np.argsort(keys, kind="stable")[:k])])
    return dataset.subset(np.sort(np.concatenate(keep)), f"{dataset.name}-{k}shot")


def save_csv(dataset: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, lab in zip(dataset.inputs, dataset.labels):
            w.writerow([f"{v:.17g}" for v in row] + [int(lab)])


def load_csv(path, num_classes: int | None = None) -> LabeledDataset:
    """Read ``f0,...,f{d-1},label``; num_classes defaults to max label + 1."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) < 2 or header[-1].strip() != "label":
            raise ValueError(f"{path}:1: header must be f0,...,f{{d-1}},label")
        d = len(header) - 1
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != d + 1:
                raise ValueError(f"{path}:{lineno}: expected {d + 1} fields, got {len(rec)}")
            try:
                feats = [float(c) for c in rec[:d]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric feature") from None
            lab = rec[d].strip()
            if not lab.isdigit():
                raise ValueError(f"{path}:{lineno}: label must be a non-negative integer, got {lab!r}")
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"{path}:{lineno}: non-finite feature")
            rows.append(feats)
            labels.append(int(lab))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    k = num_classes if num_classes is not None else max(labels) + 1
    name = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return LabeledDataset(np.array(rows), np.array(labels), k, name)


def save_metrics(report, path) -> None:
    """JSON for single reports (``to_json``), CSV for train reports (``to_csv``)."""
    if hasattr(report, "to_csv") and str(path).endswith(".csv"):
        with open(path, "w", newline="") as fh:
            fh.write(report.to_csv())
    elif hasattr(report, "to_json"):
        with open(path, "w") as fh:
            fh.write(report.to_json() + "\n")
    else:
        with open(path, "w") as fh:
            json.dump(report, fh, sort_keys=True)
            fh.write("\n")
