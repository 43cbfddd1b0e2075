"""Calibration metrics.

Instance-wise scores (TCE, Brier, log-loss), the binned expected
calibration error, and the decomposition of a proper scoring rule into
calibration, grouping and irreducible loss.  Probability arrays always have
classes on the last axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from rfcal.dataset import InvalidInputError

LOG_CLAMP = 1e-15
LOSSES = ("brier", "logloss")


@dataclass(frozen=True)
class BinningSpec:
    """Equal-width bins over [0, 1]; bins are [left, right) except the last, which is closed."""

    n_bins: int = 20

    def __post_init__(self):
        if self.n_bins < 1:
            raise InvalidInputError("n_bins must be positive")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_bins + 1)

    def assign(self, values) -> np.ndarray:
        idx = np.floor(np.asarray(values, dtype=np.float64) * self.n_bins).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    brier: float
    log_loss: float
    ece: float
    n_bins: int
    tce: Optional[float] = None
    cl: Optional[float] = None
    gl: Optional[float] = None
    il: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _binning(binning) -> BinningSpec:
    if isinstance(binning, BinningSpec):
        return binning
    if binning is None:
        return BinningSpec()
    if int(binning) < 1:
        raise InvalidInputError("n_bins must be positive")
    return BinningSpec(int(binning))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def tce(p, q):
    """True calibration error: squared distance to the true posterior."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return np.sum((p - q) ** 2, axis=-1)


def brier(p, y):
    """Multi-class Brier score, summed over classes (so at most 2)."""
    p = np.asarray(p, dtype=np.float64)
    return tce(p, one_hot(y, p.shape[-1]))


def binary_brier(p, y):
    """Squared error of the positive-class probability (the usual binary Brier).

    Equals half of :func:`brier` for two classes.
    """
    p = np.asarray(p, dtype=np.float64)
    return (p[..., 1] - (np.asarray(y) == 1)) ** 2


def log_loss(p, y):
    """Natural-log loss of the true class, with the probability clamped to 1e-15."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    py = np.take_along_axis(p, y[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(py, LOG_CLAMP))


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax (ties to the lowest index) equals the label."""
    predictions = np.atleast_2d(predictions)
    return float(np.mean(np.argmax(predictions, axis=1) == np.asarray(labels)))


def ece(predictions, labels, binning=20) -> float:
    """Class-averaged expected calibration error over equal-width bins."""
    spec = _binning(binning)
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if P.shape[0] == 0:
        raise InvalidInputError("ece needs at least one prediction")
    N, K = P.shape
    if y.max() >= K:
        raise InvalidInputError("label out of range for the prediction width")
    total = 0.0
    for j in range(K):
        bins = spec.assign(P[:, j])
        size = np.bincount(bins, minlength=spec.n_bins)
        hits = np.bincount(bins, weights=(y == j).astype(np.float64), minlength=spec.n_bins)
        mass = np.bincount(bins, weights=P[:, j], minlength=spec.n_bins)
        total += np.sum(np.abs(hits - mass)) / N
    return float(total / K)


def score_components(p, q, loss: str = "brier"):
    """Expected score s(p, q), divergence d(p, q) and entropy e(q).

    For Brier the divergence is the squared distance and the entropy the
    Gini index; for log-loss they are the KL divergence and Shannon entropy
    (natural log).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if loss == "brier":
        e = 1.0 - np.sum(q * q, axis=-1)
        d = np.sum((p - q) ** 2, axis=-1)
        s = d + e
    elif loss == "logloss":
        s = -np.sum(q * np.log(np.maximum(p, LOG_CLAMP)), axis=-1)
        e = -np.sum(q * np.log(np.maximum(q, LOG_CLAMP)), axis=-1)
        d = s - e
    else:
        raise InvalidInputError(f"loss must be one of {LOSSES}")
    return s, d, e


def prediction_groups(predictions) -> np.ndarray:
    """Group id per row; rows share a group when their predictions agree to 12 decimals."""
    rounded = np.round(np.atleast_2d(predictions), 12) + 0.0
    _, inverse = np.unique(rounded, axis=0, return_inverse=True)
    return inverse.reshape(-1)


def calibrated_groups(predictions, true_posteriors) -> np.ndarray:
    """Mean true posterior of each prediction group, broadcast back to its rows."""
    q = np.atleast_2d(np.asarray(true_posteriors, dtype=np.float64))
    groups = prediction_groups(predictions)
    sums = np.zeros((groups.max() + 1, q.shape[1]))
    np.add.at(sums, groups, q)
    sizes = np.bincount(groups).astype(np.float64)
    return (sums / sizes[:, None])[groups]


def decompose(predictions, c_vectors, true_posteriors, loss: str = "brier"):
    """Split the mean expected loss into (CL, GL, IL).

    CL is the mean divergence of predictions from the calibrated vectors,
    GL the mean divergence of calibrated vectors from the truth and IL the
    mean entropy of the truth.
    """
    _, cl, _ = score_components(predictions, c_vectors, loss)
    _, gl, _ = score_components(c_vectors, true_posteriors, loss)
    _, _, il = score_components(true_posteriors, true_posteriors, loss)
    return float(np.mean(cl)), float(np.mean(gl)), float(np.mean(il))


def bin_entropy(predictions, binning=20) -> float:
    """Base-2 entropy of the histogram of positive-class probabilities."""
    spec = _binning(binning)
    P = np.asarray(predictions, dtype=np.float64)
    pos = P[:, 1] if P.ndim == 2 else P
    if pos.size == 0:
        return 0.0
    freq = np.bincount(spec.assign(pos), minlength=spec.n_bins) / pos.size
    freq = freq[freq > 0]
    return float(-np.sum(freq * np.log2(freq)) + 0.0)


def reliability_data(predictions, reference, binning=20) -> list:
    """Per-bin records for a reliability diagram of the positive class.

    ``reference`` is either a label vector (observed = positive-class
    frequency) or an (N, K) posterior matrix (observed = mean true
    positive-class probability).  Only nonempty bins are reported.
    """
    spec = _binning(binning)
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    if P.shape[0] == 0 or P.size == 0:
        return []
    ref = np.asarray(reference)
    target = ref[:, 1].astype(np.float64) if ref.ndim == 2 else (ref == 1).astype(np.float64)
    bins = spec.assign(P[:, 1])
    size = np.bincount(bins, minlength=spec.n_bins)
    mean_pred = np.bincount(bins, weights=P[:, 1], minlength=spec.n_bins)
    observed = np.bincount(bins, weights=target, minlength=spec.n_bins)
    edges = spec.edges
    records = []
    for b in np.flatnonzero(size):
        records.append({"bin_left": float(edges[b]), "bin_right": float(edges[b + 1]),
                        "mean_pred": float(mean_pred[b] / size[b]),
                        "observed": float(observed[b] / size[b]), "count": int(size[b])})
    return records


def evaluate(predictions, labels, true_posteriors=None, binning=20) -> MetricReport:
    """Bundle the standard metrics for one set of predictions.

    TCE and the Brier decomposition are included only when true posteriors
    are known.
    """
    spec = _binning(binning)
    P = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    kwargs = {}
    if true_posteriors is not None:
        q = np.asarray(true_posteriors, dtype=np.float64)
        c = calibrated_groups(P, q)
        cl, gl, il = decompose(P, c, q, "brier")
        kwargs = dict(tce=float(np.mean(tce(P, q))), cl=cl, gl=gl, il=il)
    return MetricReport(accuracy=accuracy(P, labels), brier=float(np.mean(brier(P, labels))),
                        log_loss=float(np.mean(log_loss(P, labels))),
                        ece=ece(P, labels, spec), n_bins=spec.n_bins, **kwargs)
