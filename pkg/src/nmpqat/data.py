"""CSV ingestion, splitting, standardization and synthetic tabular tasks."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .numerics import seeded_rng

logger = logging.getLogger(__name__)


@dataclass
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    task: str = "regression"
    n_classes: Optional[int] = None
    feature_names: Optional[list] = None
    label_map: Optional[list] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        if self.task == "classification":
            self.targets = np.asarray(self.targets).astype(np.int64)
            if self.n_classes is None:
                self.n_classes = int(self.targets.max()) + 1 if self.targets.size else 0
            if self.targets.size and (self.targets.min() < 0 or self.targets.max() >= self.n_classes):
                raise ValueError("class indices out of range")
        elif self.task == "regression":
            self.targets = np.asarray(self.targets, dtype=np.float64)
        else:
            raise ValueError(f"unknown task {self.task!r}")
        if self.targets.shape[0] != self.features.shape[0]:
            raise ValueError("feature rows and target length differ")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], targets=self.targets[idx])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or self.train <= 0 or self.test <= 0:
            raise ValueError(f"split fractions must be positive: {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")


@dataclass
class StandardizeStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            self.constant = self.std == 0


class CsvError(ValueError):
    pass


def load_csv(path, target, task="regression", header=True, delimiter=",",
             label_map: Optional[Sequence[str]] = None) -> Dataset:
    """Read a numeric CSV file.

    ``target`` is a column name (requires ``header``) or a zero-based index.
    Classification labels are mapped to ``0..k-1`` in order of first
    appearance, or through ``label_map`` when one is given (e.g. from a
    trained model); the original labels are kept in ``label_map``.
    """
    if len(delimiter) != 1:
        raise CsvError("delimiter must be a single character")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    names = None
    start = 1
    if header:
        if not rows:
            raise CsvError(f"{path}: empty file")
        names = [c.strip() for c in rows[0]]
        rows = rows[1:]
        start = 2
    if not rows:
        raise CsvError(f"{path}: no data rows")
    width = len(rows[0])
    if isinstance(target, str) and not target.lstrip("-").isdigit():
        if names is None:
            raise CsvError("a named target column needs a header row")
        if target not in names:
            raise CsvError(f"target column {target!r} not found in header")
        t_col = names.index(target)
    else:
        t_col = int(target) % width
    feat_cols = [c for c in range(width) if c != t_col]
    feats, raw_targets = [], []
    for lineno, row in enumerate(rows, start=start):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise CsvError(f"{path}:{lineno}: expected {width} fields, found {len(row)}")
        vals = []
        for c in feat_cols:
            try:
                v = float(row[c])
            except ValueError:
                col = names[c] if names else f"column {c}"
                raise CsvError(f"{path}:{lineno}: non-numeric value {row[c]!r} in {col}") from None
            if not np.isfinite(v):
                col = names[c] if names else f"column {c}"
                raise CsvError(f"{path}:{lineno}: non-finite value in {col}")
            vals.append(v)
        feats.append(vals)
        raw_targets.append(row[t_col].strip())
    if task == "classification":
        if label_map is None:
            label_map = list(dict.fromkeys(raw_targets))
        label_map = [str(lab) for lab in label_map]
        lookup = {lab: i for i, lab in enumerate(label_map)}
        unknown = sorted(set(raw_targets) - lookup.keys())
        if unknown:
            raise CsvError(f"{path}: labels not in the label map: {unknown[:5]}")
        targets = np.array([lookup[t] for t in raw_targets], dtype=np.int64)
        n_classes = len(label_map)
    else:
        try:
            targets = np.array([float(t) for t in raw_targets])
        except ValueError as exc:
            raise CsvError(f"{path}: non-numeric regression target ({exc})") from None
        n_classes = None
        label_map = None
    feature_names = [names[c] for c in feat_cols] if names else None
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(feats), len(feat_cols)),
                   targets, task, n_classes, feature_names, label_map)


def split(dataset: Dataset, spec: SplitSpec):
    """Seeded shuffle, then contiguous train/val/test slices."""
    n = dataset.n_rows
    if n < 3:
        raise ValueError("need at least 3 rows to split")
    perm = seeded_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_test = n - n_train - n_val
    if n_train <= 0 or n_test <= 0 or (spec.val > 0 and n_val <= 0):
        raise ValueError(f"split {spec} leaves an empty partition for {n} rows")
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(dataset.take(p) for p in parts)


def fit_standardizer(train: Dataset) -> StandardizeStats:
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    stats = StandardizeStats(mean, std)
    if np.any(stats.constant):
        logger.warning("constant features left unscaled: %s", np.flatnonzero(stats.constant).tolist())
    return stats


def standardize(dataset: Dataset, stats: StandardizeStats) -> Dataset:
    """``(x - mean) / std`` with statistics from the training split; constant features pass through."""
    x = dataset.features
    scaled = np.where(stats.constant, x, (x - stats.mean) / np.where(stats.constant, 1.0, stats.std))
    return replace(dataset, features=scaled)


def synth_tabular(kind, n, d, noise=0.1, seed=0, n_classes=2) -> Dataset:
    """Seeded synthetic tasks standing in for private tabular workloads.

    ``regression_nonlinear``: sum of three sinusoid/product terms over random
    feature pairs plus Gaussian noise.  ``classification_blobs``: isotropic
    Gaussian clusters.  ``classification_moons``: two interleaved half-circles
    embedded in ``d`` dimensions with noise dimensions appended.
    """
    if n < 10 or d < 2:
        raise ValueError("synth_tabular needs n >= 10 and d >= 2")
    rng = seeded_rng(seed)
    if kind == "regression_nonlinear":
        x = rng.uniform(-2.0, 2.0, size=(n, d))
        pairs = [rng.choice(d, size=2, replace=False) for _ in range(3)]
        freq = rng.uniform(0.5, 1.5, size=3)
        i, j = pairs[0]
        y = np.sin(freq[0] * x[:, i]) * np.cos(freq[0] * x[:, j])
        i, j = pairs[1]
        y = y + 0.5 * x[:, i] * x[:, j]
        i, j = pairs[2]
        y = y + np.sin(freq[2] * (x[:, i] + x[:, j]))
        y = y + noise * rng.standard_normal(n)
        return Dataset(x, y, "regression")
    if kind == "classification_blobs":
        centers = rng.normal(0.0, 3.0, size=(n_classes, d))
        labels = rng.integers(0, n_classes, size=n)
        x = centers[labels] + (noise if noise > 0 else 0.0) * rng.standard_normal((n, d))
        return Dataset(x, labels, "classification", n_classes,
                       label_map=[str(i) for i in range(n_classes)])
    if kind == "classification_moons":
        labels = rng.integers(0, 2, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        x0 = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
        x1 = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
        base = np.column_stack([x0, x1]) + noise * rng.standard_normal((n, 2))
        extra = rng.standard_normal((n, d - 2))
        return Dataset(np.column_stack([base, extra]), labels, "classification", 2,
                       label_map=["0", "1"])
    raise ValueError(f"unknown synthetic task {kind!r}")
