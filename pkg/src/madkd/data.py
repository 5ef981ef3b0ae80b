"""Seeded synthetic classification datasets living in [0, 1]^d.

Used for teacher training and held-out evaluation only; the distillation
loop never sees a training split.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "all"
    offset: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be N x d with one label per row")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def _to_unit_box(points: np.ndarray, margin: float = 0.05):
    lo, hi = points.min(axis=0), points.max(axis=0)
    scale = (1.0 - 2 * margin) / np.where(hi > lo, hi - lo, 1.0)
    offset = margin - lo * scale
    return points * scale + offset, offset, scale


def lattice_centers(n_classes: int, d_in: int) -> np.ndarray:
    """First ``n_classes`` points of a regular grid with ceil(C^(1/d)) points per axis."""
    k = max(2, math.ceil(round(n_classes ** (1.0 / d_in), 9)))
    grid = np.stack(np.unravel_index(np.arange(n_classes), (k,) * d_in), axis=-1)
    return (grid + 0.5) / k


def make_blobs(n_classes: int, per_class: int, d_in: int, spread: float, rng: np.random.Generator) -> Dataset:
    """Balanced Gaussian clusters around lattice centers, affinely mapped into [0, 1]."""
    if n_classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes with at least 2 samples each")
    if spread <= 0:
        raise ValueError("spread must be positive")
    centers = lattice_centers(n_classes, d_in)
    labels = np.repeat(np.arange(n_classes), per_class)
    points = centers[labels] + spread * rng.standard_normal((len(labels), d_in))
    x, offset, scale = _to_unit_box(points)
    return Dataset(x, labels, "all", offset, scale)


def make_rings(n_classes: int, per_class: int, rng: np.random.Generator, width: float = 0.25) -> Dataset:
    """Concentric 2-D annuli; class c has mean radius c + 1."""
    if n_classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes with at least 2 samples each")
    labels = np.repeat(np.arange(n_classes), per_class)
    radius = labels + 1.0 + width * rng.uniform(-1.0, 1.0, size=len(labels))
    angle = rng.uniform(0.0, 2 * np.pi, size=len(labels))
    points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    x, offset, scale = _to_unit_box(points)
    return Dataset(x, labels, "all", offset, scale)


def split(ds: Dataset, test_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Stratified train/test partition."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < 2:
            raise ValueError(f"class {c} has fewer than 2 samples")
        idx = rng.permutation(idx)
        n_test = min(len(idx) - 1, max(1, int(round(test_fraction * len(idx)))))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    tr, te = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))
    return (Dataset(ds.inputs[tr], ds.labels[tr], "train", ds.offset, ds.scale),
            Dataset(ds.inputs[te], ds.labels[te], "test", ds.offset, ds.scale))


def write_csv(ds_or_x, path, labels=None) -> None:
    """Write rows as ``x1..xd,label`` (label column omitted when no labels)."""
    if isinstance(ds_or_x, Dataset):
        x, labels = ds_or_x.inputs, ds_or_x.labels
    else:
        x = np.asarray(ds_or_x, dtype=np.float64)
    d = x.shape[1] if x.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(d)] + (["label"] if labels is not None else []))
        for i, row in enumerate(x):
            w.writerow([repr(float(v)) for v in row] + ([int(labels[i])] if labels is not None else []))


def read_csv(path, split_tag: str = "test") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError(f"{path}: last column must be 'label'")
    arr = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(header) - 1)
    return Dataset(arr, np.array([int(r[-1]) for r in body], dtype=np.int64), split_tag)


def make_dataset(cfg, seed: int | None = None) -> tuple[Dataset, Dataset]:
    """Build the configured preset and split it; deterministic in ``cfg.seed``."""
    from .diffcore import rng_stream

    rng = rng_stream(cfg.seed if seed is None else seed, "data")
    if cfg.dataset == "blobs":
        ds = make_blobs(cfg.n_classes, cfg.per_class, cfg.d_in, cfg.spread, rng)
    elif cfg.dataset == "rings":
        if cfg.d_in != 2:
            raise ValueError("rings preset is 2-D")
        ds = make_rings(cfg.n_classes, cfg.per_class, rng)
    else:
        raise ValueError(f"unknown dataset {cfg.dataset!r}")
    return split(ds, cfg.test_fraction, rng)
