"""Labelled feature matrices, optionally carrying known class posteriors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives data violating its preconditions."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with integer class labels.

    Attributes:
        features: (N, d) float array.
        labels: (N,) int array with values in ``0..n_classes-1``.
        n_classes: number of classes K (at least 2).
        true_posteriors: optional (N, K) array of ground-truth class
            probabilities, only available for synthetic data.
    """

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    true_posteriors: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2:
            raise InvalidInputError("features must be a 2-D matrix")
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise InvalidInputError("labels must be 1-D with one entry per row")
        if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidInputError("labels must be integers")
        y = y.astype(np.int64)
        if self.n_classes < 2:
            raise InvalidInputError("n_classes must be at least 2")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise InvalidInputError(f"labels must lie in 0..{self.n_classes - 1}")
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("features must be finite")
        q = self.true_posteriors
        if q is not None:
            q = np.asarray(q, dtype=np.float64)
            if q.shape != (X.shape[0], self.n_classes):
                raise InvalidInputError("true_posteriors must have shape (N, K)")
            if np.any(q < 0) or np.any(q > 1):
                raise InvalidInputError("true_posteriors entries must lie in [0, 1]")
            if np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
                raise InvalidInputError("true_posteriors rows must sum to 1")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "true_posteriors", q)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        q = None if self.true_posteriors is None else self.true_posteriors[rows]
        return Dataset(self.features[rows], self.labels[rows], self.n_classes, q)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.n_classes != other.n_classes:
            return False
        if (self.true_posteriors is None) != (other.true_posteriors is None):
            return False
        same = (np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))
        if same and self.true_posteriors is not None:
            same = np.array_equal(self.true_posteriors, other.true_posteriors)
        return same
