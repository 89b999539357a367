"""Entropy-based dispersibility of predictions.

``d_p``  spread of hard predictions among samples sharing a ground-truth label
``d_s``  mean entropy of per-sample probability vectors
``d_c``  class-size weighted entropy of per-class mean probability vectors

All entropies are in nats with ``0 log 0 = 0``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError


@dataclass
class PredictionTable:
    """Ground-truth labels (1-based) with hard predictions and/or probabilities."""

    labels: np.ndarray
    num_classes: int
    predictions: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        k = self.num_classes
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > k):
            raise ConfigError(f"labels must lie in 1..{k}")
        if self.predictions is not None:
            self.predictions = np.asarray(self.predictions, dtype=np.int64).reshape(-1)
            if self.predictions.shape != self.labels.shape:
                raise ConfigError("one prediction per label is required")
            if self.predictions.size and (self.predictions.min() < 1 or self.predictions.max() > k):
                raise ConfigError(f"predictions must lie in 1..{k}")
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != (self.labels.size, k):
                raise ConfigError(f"probabilities must have shape ({self.labels.size}, {k})")
            if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-9):
                raise DomainError("probability rows must be non-negative and sum to 1 within 1e-9")

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @classmethod
    def from_csv(cls, path, num_classes: int | None = None) -> "PredictionTable":
        """Read ``y,pred`` rows or ``y,p1,...,pK`` rows (header optional, labels 1-based)."""
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    if rows:
                        raise ConfigError(f"{path}: non-numeric row {row}") from None
        if not rows:
            raise ConfigError(f"{path}: no prediction rows")
        arr = np.asarray(rows)
        labels = arr[:, 0].astype(np.int64)
        if arr.shape[1] == 2:
            k = num_classes or int(max(labels.max(), arr[:, 1].max()))
            return cls(labels, k, predictions=arr[:, 1].astype(np.int64))
        k = arr.shape[1] - 1
        if num_classes is not None and num_classes != k:
            raise ConfigError(f"{path}: expected {num_classes} probability columns, found {k}")
        return cls(labels, k, probs=arr[:, 1:])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            if self.probs is not None:
                wr.writerow(["y"] + [f"p{j}" for j in range(1, self.num_classes + 1)])
                for y, row in zip(self.labels, self.probs):
                    wr.writerow([int(y)] + [repr(float(v)) for v in row])
            else:
                wr.writerow(["y", "pred"])
                for y, p in zip(self.labels, self.predictions):
                    wr.writerow([int(y), int(p)])


def entropy(p, tol: float = 1e-6) -> float:
    """Shannon entropy ``-sum p ln p`` of one probability vector."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise DomainError("entropy: negative probability")
    if abs(p.sum() - 1.0) > tol:
        raise DomainError(f"entropy: probabilities sum to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def _row_entropies(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=1)


def class_prediction_distribution(table: PredictionTable, label: int) -> np.ndarray:
    """Empirical distribution of hard predictions among samples with ``y == label``."""
    sel = table.predictions[table.labels == label]
    if sel.size == 0:
        return np.zeros(table.num_classes)
    return np.bincount(sel - 1, minlength=table.num_classes) / sel.size


def d_p(table: PredictionTable) -> float:
    """Averaged prediction dispersibility ``sum_j (n_j / N) H(P^(j))``."""
    if table.predictions is None:
        raise ConfigError("d_p needs hard predictions")
    if table.n == 0:
        raise ConfigError("empty prediction table")
    total = 0.0
    for j in range(1, table.num_classes + 1):
        nj = int(np.sum(table.labels == j))
        if nj:
            total += nj * entropy(class_prediction_distribution(table, j))
    return total / table.n


def d_s(table: PredictionTable) -> float:
    """Averaged sample-wise dispersibility ``(1/N) sum_i H(f(x_i))``."""
    if table.probs is None:
        raise ConfigError("d_s needs probability rows")
    if table.n == 0:
        raise ConfigError("empty prediction table")
    return float(_row_entropies(table.probs).mean())


def d_c(table: PredictionTable) -> float:
    """Averaged class-wise dispersibility ``(1/N) sum_j n_j H(mean_{y=j} f(x))``."""
    if table.probs is None:
        raise ConfigError("d_c needs probability rows")
    if table.n == 0:
        raise ConfigError("empty prediction table")
    total = 0.0
    for j in range(1, table.num_classes + 1):
        rows = table.probs[table.labels == j]
        if len(rows):
            mean = rows.mean(axis=0)
            total += len(rows) * float(_row_entropies(mean[None, :])[0])
    return total / table.n


def class_bound_witness(table: PredictionTable):
    """Check ``D_c > D_s / N`` on one table.

    Returns ``(D_c, D_s / N, holds)``.  The strict inequality needs ``N >= 2``
    and at least one row with positive entropy; when every row is one-hot both
    sides are 0 and ``holds`` is False.
    """
    if table.n < 2:
        raise ConfigError("the class-wise bound needs N >= 2")
    dc = d_c(table)
    bound = d_s(table) / table.n
    return dc, bound, bool(dc > bound)
