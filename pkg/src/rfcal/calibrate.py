"""Post-hoc calibration of binary random-forest outputs.

Seven methods are provided: Platt scaling, beta calibration, isotonic
regression (PAV), Venn-Abers, parameterized probability adjustment (PPA),
curtailment, and the rank calibrator (Borda-aggregated tree rankings
followed by isotonic regression).

Every fitted model exposes ``predict_proba(base_probs, X)`` returning
(n, 2) calibrated probabilities, where ``base_probs`` are the forest's own
predictions for ``X``.  Score-based methods only look at ``base_probs``,
curtailment and the rank calibrator only at ``X``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rfcal import forest as rf
from rfcal.dataset import Dataset, InvalidInputError

METHODS = ("platt", "beta", "iso", "va", "ppa", "ct", "rank")
PPA_GRID = np.round(np.arange(101) * 0.01, 2)
CURTAIL_CANDIDATES = (1, 2, 5, 10, 20, 50, 100, 200)
BETA_CLAMP = 1e-6
PROB_CLAMP = 1e-12


class DegenerateDataError(InvalidInputError):
    """Calibration data carries too little information to fit the method."""


def _as_binary_scores(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InvalidInputError("scores and labels must have the same length")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("scores must be finite")
    if np.any((y != 0) & (y != 1)):
        raise InvalidInputError("calibration labels must be binary (0/1)")
    return s, y.astype(np.float64)


def _require_both_labels(y):
    if y.size == 0 or y.min() == y.max():
        raise DegenerateDataError("calibration labels must contain both classes")


def _to_pair(p1):
    p1 = np.asarray(p1, dtype=np.float64)
    return np.column_stack([1.0 - p1, p1])


def _require_binary_width(probs):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.shape[1] != 2:
        raise InvalidInputError("calibrators are restricted to binary problems")
    return probs


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def _mean_logloss(z, y):
    p = np.clip(_sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def fit_logistic(features, y, max_iter=200, tol=1e-8):
    """Unpenalised logistic regression with intercept by damped Newton.

    Returns ``(coef, intercept)`` minimising the mean log-loss; stops when the
    gradient norm drops below ``tol`` or after ``max_iter`` Newton steps
    (separable data never converges, the iterate just keeps sharpening).
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    A = np.column_stack([F, np.ones(F.shape[0])])
    y = np.asarray(y, dtype=np.float64)
    w = np.zeros(A.shape[1])
    M = A.shape[0]
    for _ in range(max_iter):
        z = A @ w
        p = _sigmoid(z)
        grad = A.T @ (p - y) / M
        if np.linalg.norm(grad) < tol:
            break
        H = (A * (p * (1.0 - p))[:, None]).T @ A / M
        H[np.diag_indices_from(H)] += 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        loss = _mean_logloss(z, y)
        t = 1.0
        while t > 1e-10:
            cand = w - t * step
            if _mean_logloss(A @ cand, y) <= loss + 1e-4 * t * (grad @ -step):
                break
            t *= 0.5
        w = w - t * step
    return w[:-1], float(w[-1])


@dataclass(frozen=True)
class PlattModel:
    """Logistic map s -> 1 / (1 + exp(gamma * s + delta)); gamma <= 0 keeps it nondecreasing."""

    gamma: float
    delta: float

    def __call__(self, scores):
        return apply_platt(self, scores)

    def predict_proba(self, base_probs, X=None):
        return _to_pair(self(_require_binary_width(base_probs)[:, 1]))


def apply_platt(model: PlattModel, score):
    s = np.asarray(score, dtype=np.float64)
    return _sigmoid(-(model.gamma * s + model.delta))


def fit_platt(scores, labels) -> PlattModel:
    """Fit Platt scaling by minimising log-loss on raw 0/1 targets."""
    s, y = _as_binary_scores(scores, labels)
    _require_both_labels(y)
    coef, intercept = fit_logistic(s, y)
    if coef[0] < 0:
        # decreasing fit; the best nondecreasing map is the constant base rate
        _, intercept = fit_logistic(np.zeros((s.size, 0)), y)
        coef = np.zeros(1)
    return PlattModel(gamma=float(-coef[0]) + 0.0, delta=float(-intercept) + 0.0)


@dataclass(frozen=True)
class BetaModel:
    """Beta calibration map with a, b >= 0."""

    a: float
    b: float
    c: float

    def __call__(self, scores):
        return apply_beta(self, scores)

    def predict_proba(self, base_probs, X=None):
        return _to_pair(self(_require_binary_width(base_probs)[:, 1]))


def _beta_features(s):
    s = np.clip(np.asarray(s, dtype=np.float64), BETA_CLAMP, 1.0 - BETA_CLAMP)
    return np.log(s), -np.log1p(-s)


def apply_beta(model: BetaModel, score):
    ls, lr = _beta_features(score)
    return _sigmoid(model.c + model.a * ls + model.b * lr)


def fit_beta(scores, labels) -> BetaModel:
    """Fit the three-parameter beta map as a logistic regression on
    (ln s, -ln(1 - s)); a negative slope is pinned to zero and the rest refit."""
    s, y = _as_binary_scores(scores, labels)
    _require_both_labels(y)
    ls, lr = _beta_features(s)
    coef, c = fit_logistic(np.column_stack([ls, lr]), y)
    a, b = coef
    if a < 0 or b < 0:
        keep = lr if a < 0 else ls
        (slope,), c = fit_logistic(keep, y)
        if slope < 0:
            slope = 0.0
            _, c = fit_logistic(np.zeros((s.size, 0)), y)
        a, b = (0.0, slope) if a < 0 else (slope, 0.0)
    return BetaModel(float(a), float(b), float(c))


@dataclass(frozen=True, eq=False)
class IsotonicModel:
    """Step function: ``values[k]`` applies from ``breakpoints[k]`` up to the next breakpoint."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __call__(self, scores):
        return apply_isotonic(self, scores)

    def predict_proba(self, base_probs, X=None):
        return _to_pair(self(_require_binary_width(base_probs)[:, 1]))


def pool_adjacent_violators(values, weights):
    """Weighted monotone least squares of an already ordered sequence.

    Returns ``(starts, fitted)``: the index where each pooled block begins
    and the block means, which are strictly increasing.
    """
    starts, sums, mass = [], [], []
    for i, (v, w) in enumerate(zip(values, weights)):
        starts.append(i)
        sums.append(v * w)
        mass.append(w)
        while len(sums) > 1 and sums[-2] * mass[-1] >= sums[-1] * mass[-2]:
            s, m = sums.pop(), mass.pop()
            starts.pop()
            sums[-1] += s
            mass[-1] += m
    return np.array(starts, dtype=np.int64), np.array(sums) / np.array(mass)


def fit_isotonic(scores, labels, weights=None) -> IsotonicModel:
    """Isotonic regression by PAV; tied scores are pooled before the sweep."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise InvalidInputError("isotonic regression needs at least one sample")
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    uniq, inverse = np.unique(s, return_inverse=True)
    wy = np.bincount(inverse, weights=w * y)
    ww = np.bincount(inverse, weights=w)
    starts, fitted = pool_adjacent_violators(wy / ww, ww)
    return IsotonicModel(uniq[starts], fitted)


def apply_isotonic(model: IsotonicModel, score):
    idx = np.searchsorted(model.breakpoints, np.asarray(score, dtype=np.float64), side="right") - 1
    return model.values[np.clip(idx, 0, model.values.size - 1)]


def venn_abers_predict(cal_scores, cal_labels, score):
    """Venn-Abers interval and point prediction for a single query score.

    Returns ``(p0, p1, p_va)``: the isotonic fits of the calibration data
    augmented with the query labelled 0 and 1 respectively, evaluated at the
    query, and the minimax point estimate.
    """
    s, y = _as_binary_scores(cal_scores, cal_labels)
    aug_s = np.append(s, float(score))
    p = []
    for label in (0.0, 1.0):
        p.append(float(apply_isotonic(fit_isotonic(aug_s, np.append(y, label)), score)))
    p0, p1 = p
    return p0, p1, venn_abers_merge(p0, p1)


def venn_abers_merge(p0, p1):
    """Minimax point estimate of the interval [p0, p1]; equals p when p0 = p1 = p."""
    mid = 0.5 * (p0 + p1)
    return mid + (p1 - p0) * (0.5 - mid)


@dataclass(frozen=True, eq=False)
class VennAbersModel:
    """Stores the calibration sample; every query refits both isotonic maps."""

    scores: np.ndarray
    labels: np.ndarray

    def intervals(self, scores) -> np.ndarray:
        """(n, 3) array of (p0, p1, p_va) per query."""
        q = np.asarray(scores, dtype=np.float64).reshape(-1)
        return np.array([venn_abers_predict(self.scores, self.labels, v) for v in q]).reshape(-1, 3)

    def __call__(self, scores):
        return self.intervals(scores)[:, 2]

    def predict_proba(self, base_probs, X=None):
        return _to_pair(self(_require_binary_width(base_probs)[:, 1]))


def fit_venn_abers(scores, labels) -> VennAbersModel:
    s, y = _as_binary_scores(scores, labels)
    if s.size == 0:
        raise InvalidInputError("Venn-Abers needs at least one calibration sample")
    return VennAbersModel(s, y.astype(np.int64))


@dataclass(frozen=True)
class PPAModel:
    """Convex mix of a prediction with the uniform distribution over its argmax set."""

    r: float

    def __call__(self, probs):
        return apply_ppa(self, probs)

    def predict_proba(self, base_probs, X=None):
        return self(_require_binary_width(base_probs))


def _argmax_mass(P):
    top = P == P.max(axis=1, keepdims=True)
    return top / top.sum(axis=1, keepdims=True)


def apply_ppa(model: PPAModel, p):
    P = np.asarray(p, dtype=np.float64)
    flat = P.ndim == 1
    P = np.atleast_2d(P)
    out = model.r * _argmax_mass(P) + (1.0 - model.r) * P
    return out[0] if flat else out


def fit_ppa(prediction_vectors, labels, grid=PPA_GRID) -> PPAModel:
    """Pick r from ``grid`` minimising the mean Brier score; ties go to the smallest r."""
    P = np.atleast_2d(np.asarray(prediction_vectors, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if P.shape[0] == 0:
        raise InvalidInputError("PPA needs a nonempty calibration set")
    _require_binary_width(P)
    target = np.zeros_like(P)
    target[np.arange(P.shape[0]), y] = 1.0
    top = _argmax_mass(P)
    losses = np.array([np.mean(np.sum((r * top + (1 - r) * P - target) ** 2, axis=1))
                       for r in grid])
    best = int(np.flatnonzero(losses <= losses.min() + 1e-12)[0])
    return PPAModel(float(grid[best]))


def _check_binary_forest(model):
    if model.n_classes != 2:
        raise InvalidInputError("calibrators are restricted to binary problems")


def predict_curtailed(model: rf.RandomForestModel, v: int, X, laplace=None, tree_kind=None):
    """Forest prediction where each tree answers from the deepest node on the
    query's path that holds at least ``v`` training samples."""
    laplace = model.config.laplace if laplace is None else laplace
    tree_kind = model.config.tree_kind if tree_kind is None else tree_kind
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    total = np.zeros((X.shape[0], model.n_classes))
    for tree in model.trees:
        total += rf.leaf_distribution(tree.class_counts[tree.apply_curtailed(X, v)],
                                      laplace, tree_kind)
    return total / model.n_trees


def _curtailed_oob(model, v, X):
    def tree_predict(tree, rows):
        return rf.leaf_distribution(tree.class_counts[tree.apply_curtailed(rows, v)],
                                    model.config.laplace, model.config.tree_kind)
    return rf.oob_predict(model, X, tree_predict=tree_predict)


@dataclass(frozen=True)
class CurtailModel:
    v: int
    forest: rf.RandomForestModel = None

    def predict_proba(self, base_probs, X):
        return predict_curtailed(self.forest, self.v, X)


def fit_curtailment(model: rf.RandomForestModel, X_cal, y_cal, candidates=CURTAIL_CANDIDATES,
                    oob: bool = False) -> CurtailModel:
    """Choose the curtailment threshold minimising calibration Brier; ties go to the smaller v.

    With ``oob=True``, ``X_cal``/``y_cal`` must be the forest's training data
    and each row is scored only by the trees it was out of bag for.
    """
    _check_binary_forest(model)
    X = np.atleast_2d(np.asarray(X_cal, dtype=np.float64))
    y = np.asarray(y_cal, dtype=np.int64)
    if y.size == 0:
        raise InvalidInputError("curtailment needs a nonempty calibration set")
    root = max(int(t.n_samples[0]) for t in model.trees)
    grid = [v for v in candidates if v <= root] or [1]
    losses = []
    for v in grid:
        if oob:
            P = _curtailed_oob(model, v, X)
            keep = ~np.isnan(P[:, 0])
            P, yy = P[keep], y[keep]
        else:
            P, yy = predict_curtailed(model, v, X), y
        losses.append(np.mean((P[:, 1] - yy) ** 2 + (P[:, 0] - (1 - yy)) ** 2))
    losses = np.array(losses)
    best = int(np.flatnonzero(losses <= losses.min() + 1e-12)[0])
    return CurtailModel(int(grid[best]), model)


def rank_forest_config(config: rf.ForestConfig) -> rf.ForestConfig:
    """Unpruned, Laplace-corrected PET variant of ``config`` used for ranking."""
    return config.replace(max_depth=None, min_samples_split=2, min_samples_leaf=1,
                          laplace=True, tree_kind="PET")


def train_rank_forest(train: Dataset, config: rf.ForestConfig, n_jobs: int = 1,
                      base_forest: rf.RandomForestModel = None):
    """Train the rank forest; reuses ``base_forest``'s trees when they were grown
    identically (Laplace and tree kind only matter at prediction time)."""
    rank_cfg = rank_forest_config(config)
    if base_forest is not None and base_forest.n_train == train.n_rows:
        grown = base_forest.config.replace(laplace=True, tree_kind="PET")
        if grown == rank_cfg:
            return rf.RandomForestModel(base_forest.trees, base_forest.bootstrap_indices,
                                        rank_cfg, base_forest.n_classes, base_forest.n_features,
                                        base_forest.oob_indices)
    return rf.train_forest(train, rank_cfg, n_jobs=n_jobs)


def tree_positive_probs(rank_forest: rf.RandomForestModel, X) -> np.ndarray:
    """(T, n) positive-class probabilities of each tree."""
    return rf.per_tree_predictions(rank_forest, X)[:, :, 1]


def borda_scores(cal_tree_probs, query_tree_probs) -> np.ndarray:
    """Borda score of each query against the calibration rows, summed over trees.

    A query earns one point per (tree, calibration row) it outranks and half
    a point per tie.
    """
    C = np.atleast_2d(np.asarray(cal_tree_probs, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(query_tree_probs, dtype=np.float64))
    total = np.zeros(Q.shape[1])
    for c, q in zip(C, Q):
        ordered = np.sort(c)
        below = np.searchsorted(ordered, q, side="left")
        upto = np.searchsorted(ordered, q, side="right")
        total += below + 0.5 * (upto - below)
    return total


def borda_score(rank_forest: rf.RandomForestModel, X_cal, x) -> float:
    """Borda score of the single instance ``x``."""
    return float(borda_scores(tree_positive_probs(rank_forest, X_cal),
                              tree_positive_probs(rank_forest, np.atleast_2d(x)))[0])


@dataclass(frozen=True, eq=False)
class RankModel:
    cal_tree_probs: np.ndarray
    isotonic: IsotonicModel
    rank_forest: rf.RandomForestModel

    def scores(self, X) -> np.ndarray:
        return borda_scores(self.cal_tree_probs, tree_positive_probs(self.rank_forest, X))

    def predict_proba(self, base_probs, X):
        return _to_pair(apply_isotonic(self.isotonic, self.scores(X)))


def fit_rank(rank_forest: rf.RandomForestModel, X_cal, y_cal) -> RankModel:
    """Isotonic regression of calibration labels on their Borda scores."""
    _check_binary_forest(rank_forest)
    y = np.asarray(y_cal, dtype=np.float64)
    if y.size == 0:
        raise InvalidInputError("rank calibration needs a nonempty calibration set")
    cal = tree_positive_probs(rank_forest, X_cal)
    s = borda_scores(cal, cal)
    return RankModel(cal, fit_isotonic(s, y), rank_forest)


def fit_calibrator(method: str, forest: rf.RandomForestModel, X_cal, y_cal, cal_probs=None,
                   rank_forest=None, oob: bool = False):
    """Fit ``method`` on calibration data for ``forest``.

    ``cal_probs`` are the forest's predictions on the calibration rows (OOB
    predictions when ``oob`` is set; rows without an OOB prediction are
    dropped).  ``rank_forest`` is required for ``"rank"``.
    """
    if method not in METHODS:
        raise InvalidInputError(f"unknown calibration method {method!r}; valid: {', '.join(METHODS)}")
    _check_binary_forest(forest)
    X_cal = np.atleast_2d(np.asarray(X_cal, dtype=np.float64))
    y_cal = np.asarray(y_cal, dtype=np.int64)
    if method == "ct":
        return fit_curtailment(forest, X_cal, y_cal, oob=oob)
    if method == "rank":
        if rank_forest is None:
            raise InvalidInputError("rank calibration requires a rank forest")
        return fit_rank(rank_forest, X_cal, y_cal)
    if cal_probs is None:
        cal_probs = rf.oob_predict(forest, X_cal) if oob else rf.predict_forest(forest, X_cal)
    P = np.atleast_2d(np.asarray(cal_probs, dtype=np.float64))
    keep = ~np.isnan(P[:, 0])
    P, y = P[keep], y_cal[keep]
    if method == "ppa":
        return fit_ppa(P, y)
    fit = {"platt": fit_platt, "beta": fit_beta, "iso": fit_isotonic, "va": fit_venn_abers}[method]
    if method == "iso":
        _as_binary_scores(P[:, 1], y)
    return fit(P[:, 1], y)
