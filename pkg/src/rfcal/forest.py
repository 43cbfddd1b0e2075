"""Decision trees and random forests grown from scratch.

Trees are stored as flat node arrays (sklearn style).  Node ``i`` is a leaf
when ``feature[i] == -1``; otherwise rows with ``x[feature] <= threshold``
go to ``left[i]`` and the rest to ``right[i]``.  Every node keeps its
training sample count and weighted class counts so predictions can be
produced from any depth (curtailment) and with or without Laplace
correction at prediction time.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from rfcal import _split
from rfcal.dataset import Dataset, InvalidInputError

CRITERIA = ("gini", "entropy")
TREE_KINDS = ("PET", "CT")
CLASS_WEIGHTS = (None, "balanced", "balanced_subsample")
MAX_FEATURES = ("sqrt", "log2", "all")


class NoOOBDataError(RuntimeError):
    """Raised when out-of-bag predictions are requested without bootstrapping."""


@dataclass(frozen=True)
class ForestConfig:
    """Random forest hyper-parameters.

    Defaults mirror the scikit-learn defaults used as the ``RF_d`` baseline.
    ``max_features`` is one of ``"sqrt"``, ``"log2"``, ``"all"`` or a
    positive int.
    """

    n_trees: int = 100
    criterion: str = "gini"
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_features: Union[str, int] = "sqrt"
    class_weight: Optional[str] = None
    bootstrap: bool = True
    laplace: bool = False
    tree_kind: str = "PET"
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.n_trees, (int, np.integer)) or self.n_trees < 1:
            raise InvalidInputError("n_trees must be a positive integer")
        if self.criterion not in CRITERIA:
            raise InvalidInputError(f"criterion must be one of {CRITERIA}")
        if self.max_depth is not None and self.max_depth < 1:
            raise InvalidInputError("max_depth must be None or >= 1")
        if self.min_samples_split < 2:
            raise InvalidInputError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise InvalidInputError("min_samples_leaf must be >= 1")
        if isinstance(self.max_features, str):
            if self.max_features not in MAX_FEATURES:
                raise InvalidInputError(f"max_features must be one of {MAX_FEATURES} or an int")
        elif int(self.max_features) < 1:
            raise InvalidInputError("max_features must be >= 1")
        if self.class_weight not in CLASS_WEIGHTS:
            raise InvalidInputError(f"class_weight must be one of {CLASS_WEIGHTS}")
        if self.tree_kind not in TREE_KINDS:
            raise InvalidInputError(f"tree_kind must be one of {TREE_KINDS}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be a non-negative 64-bit integer")

    def n_split_features(self, n_features: int) -> int:
        """Number of features drawn at every node."""
        mf = self.max_features
        if mf == "all":
            k = n_features
        elif mf == "sqrt":
            k = math.ceil(math.sqrt(n_features))
        elif mf == "log2":
            k = math.ceil(math.log2(n_features)) if n_features > 1 else 1
        else:
            k = int(mf)
        return max(1, min(k, n_features))

    def replace(self, **changes) -> "ForestConfig":
        values = asdict(self)
        values.update(changes)
        return ForestConfig(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ForestConfig":
        return cls(**values)


@dataclass(frozen=True, eq=False)
class Tree:
    """A fitted tree in flat-array form."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_samples: np.ndarray
    class_counts: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_internal(self) -> int:
        return int(np.count_nonzero(self.feature >= 0))

    @property
    def n_classes(self) -> int:
        return self.class_counts.shape[1]

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def apply_curtailed(self, X: np.ndarray, min_samples: int) -> np.ndarray:
        """Deepest node on each row's path holding ``>= min_samples`` samples.

        The root is returned when even the root is smaller than the threshold.
        """
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            child = np.where(go_left, self.left[nd], self.right[nd])
            move = self.n_samples[child] >= min_samples
            active = active[move]
            node[active] = child[move]
            active = active[self.feature[node[active]] >= 0]
        return node

    def to_nested(self, node: int = 0) -> dict:
        """Nested-object view used by the JSON model format."""
        out = {"n_samples": int(self.n_samples[node]),
               "class_counts": [float(c) for c in self.class_counts[node]]}
        if self.feature[node] >= 0:
            out["feature"] = int(self.feature[node])
            out["threshold"] = float(self.threshold[node])
            out["left"] = self.to_nested(int(self.left[node]))
            out["right"] = self.to_nested(int(self.right[node]))
        return out

    @classmethod
    def from_nested(cls, root: dict) -> "Tree":
        feature, threshold, left, right, n_samples, counts = [], [], [], [], [], []

        def add(obj):
            nid = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            n_samples.append(int(obj["n_samples"]))
            counts.append([float(c) for c in obj["class_counts"]])
            return nid

        stack = [(root, add(root))]
        while stack:
            obj, nid = stack.pop()
            if "feature" in obj:
                feature[nid] = int(obj["feature"])
                threshold[nid] = float(obj["threshold"])
                left[nid] = add(obj["left"])
                right[nid] = add(obj["right"])
                stack.append((obj["right"], right[nid]))
                stack.append((obj["left"], left[nid]))
        return cls(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                   np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                   np.array(n_samples, dtype=np.int64), np.array(counts, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class RandomForestModel:
    """A trained ensemble and the bootstrap bookkeeping behind it."""

    trees: list
    bootstrap_indices: list
    config: ForestConfig
    n_classes: int
    n_features: int
    _oob: list = field(default=None, repr=False)

    def __post_init__(self):
        if self._oob is None:
            oob = []
            for idx in self.bootstrap_indices:
                if self.config.bootstrap:
                    oob.append(np.setdiff1d(np.arange(len(idx)), idx))
                else:
                    oob.append(np.zeros(0, dtype=np.int64))
            object.__setattr__(self, "_oob", oob)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def n_train(self) -> int:
        return len(self.bootstrap_indices[0])

    @property
    def oob_indices(self) -> list:
        return self._oob

    def oob_membership(self) -> np.ndarray:
        """Boolean (T, N) matrix; entry (t, i) is True when row i is out of bag for tree t."""
        mask = np.zeros((self.n_trees, self.n_train), dtype=bool)
        for t, oob in enumerate(self._oob):
            mask[t, oob] = True
        return mask


class Split(NamedTuple):
    feature: int
    threshold: float
    gain: float


def bootstrap_sample(n: int, rng: np.random.Generator):
    """Draw ``n`` row indices with replacement.

    Returns:
        (sample_indices, oob_indices) where the OOB set is the sorted
        complement of the distinct drawn indices.
    """
    if n < 1:
        raise InvalidInputError("bootstrap needs at least one row")
    sample = rng.integers(0, n, size=n)
    oob = np.setdiff1d(np.arange(n), sample)
    return sample, oob


def impurity(class_counts, criterion: str = "gini") -> float:
    """Gini index or base-2 entropy of a class-count vector."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise InvalidInputError("class counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise InvalidInputError("class counts must not all be zero")
    if criterion not in CRITERIA:
        raise InvalidInputError(f"criterion must be one of {CRITERIA}")
    code = _split.GINI if criterion == "gini" else _split.ENTROPY
    return float(_split._impurity(counts, total, code))


def find_best_split(X, y, rows, feature_subset, weights=None, criterion="gini",
                    min_samples_leaf=1, n_classes=None, sample_counts=None,
                    allow_zero_gain=False) -> Optional[Split]:
    """Best axis-aligned split of ``rows`` over the features in ``feature_subset``.

    Candidate thresholds are midpoints between consecutive distinct values.
    ``weights`` weight the impurity computation, ``sample_counts`` (row
    multiplicities) enforce ``min_samples_leaf``.  Returns None when no
    candidate has positive gain (or, with ``allow_zero_gain``, when there is
    no valid candidate at all).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size < 2:
        return None
    K = int(n_classes if n_classes is not None else y.max() + 1)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    c = (np.ones(X.shape[0], dtype=np.int64) if sample_counts is None
         else np.asarray(sample_counts, dtype=np.int64))
    order = np.sort(np.asarray(feature_subset, dtype=np.int64))
    code = _split.GINI if criterion == "gini" else _split.ENTROPY
    min_gain = -np.inf if allow_zero_gain else 1e-12
    f, t, g = _split.best_split(X, y, rows, w, c, K, order, order.size, code,
                                int(min_samples_leaf), min_gain)
    if f < 0:
        return None
    return Split(int(f), float(t), float(g))


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, sample_counts: np.ndarray,
              row_weights: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    """Grow one tree on the rows with positive ``sample_counts``.

    A node becomes a leaf when it is pure, has reached ``max_depth``, holds
    fewer than ``min_samples_split`` samples, or admits no valid split.
    Zero-gain splits of impure nodes are accepted, as in CART.
    """
    n_features = X.shape[1]
    k = config.n_split_features(n_features)
    code = _split.GINI if config.criterion == "gini" else _split.ENTROPY
    max_depth = config.max_depth if config.max_depth is not None else np.iinfo(np.int64).max
    counts_i = sample_counts.astype(np.int64)

    feature, threshold, left, right, n_samples, counts = [], [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n_samples.append(int(counts_i[rows].sum()))
        counts.append(np.bincount(y[rows], weights=row_weights[rows], minlength=n_classes))
        return len(feature) - 1

    root_rows = np.flatnonzero(counts_i > 0)
    stack = [(new_node(root_rows), root_rows, 0)]
    while stack:
        nid, rows, depth = stack.pop()
        if (depth >= max_depth or n_samples[nid] < config.min_samples_split
                or np.count_nonzero(counts[nid] > 0) <= 1):
            continue
        order = rng.permutation(n_features).astype(np.int64)
        f, t, _ = _split.best_split(X, y, rows, row_weights, counts_i, n_classes, order, k,
                                    code, config.min_samples_leaf, -np.inf)
        if f < 0:
            continue
        mask = X[rows, f] <= t
        lid = new_node(rows[mask])
        rid = new_node(rows[~mask])
        feature[nid], threshold[nid], left[nid], right[nid] = f, t, lid, rid
        stack.append((rid, rows[~mask], depth + 1))
        stack.append((lid, rows[mask], depth + 1))

    counts = np.array(counts, dtype=np.float64).reshape(len(feature), n_classes)
    # children are created after their parent, so a reverse sweep is bottom-up
    for nid in range(len(feature) - 1, -1, -1):
        if feature[nid] >= 0:
            counts[nid] = counts[left[nid]] + counts[right[nid]]
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(n_samples, dtype=np.int64), counts)


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    """Per-tree generator; the stream depends only on (seed, tree_index)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(tree_index),)))


def _class_weights(labels: np.ndarray, multiplicity: np.ndarray, n_classes: int) -> np.ndarray:
    per_class = np.bincount(labels, weights=multiplicity, minlength=n_classes)
    total = per_class.sum()
    with np.errstate(divide="ignore"):
        cw = np.where(per_class > 0, total / (n_classes * per_class), 0.0)
    return cw


def _train_one(X, y, n_classes, config, t):
    rng = tree_rng(config.seed, t)
    n = X.shape[0]
    if config.bootstrap:
        sample, _ = bootstrap_sample(n, rng)
    else:
        sample = np.arange(n)
    mult = np.bincount(sample, minlength=n).astype(np.float64)
    if config.class_weight == "balanced":
        cw = _class_weights(y, np.ones(n), n_classes)
    elif config.class_weight == "balanced_subsample":
        cw = _class_weights(y, mult, n_classes)
    else:
        cw = np.ones(n_classes)
    weights = mult * cw[y]
    return grow_tree(X, y, n_classes, mult, weights, config, rng), sample


def train_forest(dataset: Dataset, config: ForestConfig = ForestConfig(),
                 n_jobs: int = 1) -> RandomForestModel:
    """Train ``config.n_trees`` trees, each on its own bootstrap sample.

    Trees may be grown on up to ``n_jobs`` threads; the model does not depend
    on the thread count.
    """
    if dataset.n_rows == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    X, y, K = dataset.features, dataset.labels, dataset.n_classes
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda t: _train_one(X, y, K, config, t), range(config.n_trees)))
    else:
        results = [_train_one(X, y, K, config, t) for t in range(config.n_trees)]
    trees = [r[0] for r in results]
    samples = [r[1] for r in results]
    return RandomForestModel(trees, samples, config, K, dataset.n_features)


def leaf_distribution(class_counts, laplace: bool = False, tree_kind: str = "PET") -> np.ndarray:
    """Turn class counts (last axis = classes) into probability vectors.

    PET gives relative frequencies, optionally with one pseudo-count per
    class.  CT gives the one-hot vector of the most frequent class, ties to
    the lowest class index.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    K = counts.shape[-1]
    if laplace:
        probs = (counts + 1.0) / (counts.sum(axis=-1, keepdims=True) + K)
    else:
        probs = counts / counts.sum(axis=-1, keepdims=True)
    if tree_kind == "CT":
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, np.argmax(probs, axis=-1)[..., None], 1.0, axis=-1)
        return onehot
    return probs


def predict_tree(tree: Tree, X, laplace: bool = False, tree_kind: str = "PET") -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return leaf_distribution(tree.class_counts[tree.apply(X)], laplace, tree_kind)


def _resolve(model: RandomForestModel, laplace, tree_kind):
    return (model.config.laplace if laplace is None else laplace,
            model.config.tree_kind if tree_kind is None else tree_kind)


def per_tree_predictions(model: RandomForestModel, X, laplace=None, tree_kind=None) -> np.ndarray:
    """Stacked (T, n, K) per-tree probability vectors."""
    laplace, tree_kind = _resolve(model, laplace, tree_kind)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.stack([predict_tree(t, X, laplace, tree_kind) for t in model.trees])


def predict_forest(model: RandomForestModel, X, laplace=None, tree_kind=None) -> np.ndarray:
    """Mean of the per-tree distributions; Laplace/tree kind default to the model config."""
    laplace, tree_kind = _resolve(model, laplace, tree_kind)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    total = np.zeros((X.shape[0], model.n_classes))
    for tree in model.trees:
        total += predict_tree(tree, X, laplace, tree_kind)
    return total / model.n_trees


def oob_predict(model: RandomForestModel, X, laplace=None, tree_kind=None, tree_predict=None):
    """Out-of-bag predictions for the training rows.

    Row i averages only the trees for which it was out of bag.  Rows that
    landed in every bootstrap sample get a row of NaN.  ``tree_predict``
    optionally replaces the per-tree predictor (signature
    ``(tree, X) -> (n, K)``), which lets curtailed trees reuse the same
    bookkeeping.

    Raises:
        NoOOBDataError: the forest was trained without bootstrapping.
    """
    if not model.config.bootstrap:
        raise NoOOBDataError("forest was trained without bootstrap; no OOB data exists")
    laplace, tree_kind = _resolve(model, laplace, tree_kind)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] != model.n_train:
        raise InvalidInputError("OOB prediction needs the exact training matrix")
    if tree_predict is None:
        def tree_predict(tree, rows):
            return predict_tree(tree, rows, laplace, tree_kind)
    total = np.zeros((X.shape[0], model.n_classes))
    n_votes = np.zeros(X.shape[0])
    for tree, oob in zip(model.trees, model.oob_indices):
        if oob.size:
            total[oob] += tree_predict(tree, X[oob])
            n_votes[oob] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        out = total / n_votes[:, None]
    out[n_votes == 0] = np.nan
    return out


def unique_prediction_groups(model: RandomForestModel, X, laplace=None, tree_kind=None) -> int:
    """Number of distinct forest outputs on ``X`` (entries rounded to 12 decimals)."""
    return count_unique_rows(predict_forest(model, X, laplace, tree_kind))


def count_unique_rows(predictions: np.ndarray) -> int:
    rounded = np.round(np.atleast_2d(predictions), 12) + 0.0
    return int(np.unique(rounded, axis=0).shape[0])
