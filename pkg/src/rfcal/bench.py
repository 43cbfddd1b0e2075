"""Experimental protocols: cross-validated benchmarks, searches and sweeps.

Every random choice is derived from the master seed together with the
dataset id, repeat and fold, so results do not depend on how cells are
scheduled across threads.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from rfcal import calibrate as cal
from rfcal import forest as rf
from rfcal import metrics as mt
from rfcal import stats
from rfcal import synthgen as sg
from rfcal.dataset import Dataset, InvalidInputError

BASELINES = ("rf_d", "rf_opt", "rf_large")
METHODS = BASELINES + ("platt", "iso", "beta", "va", "ct", "ppa", "rank")
CALIBRATORS = tuple(m for m in METHODS if m not in BASELINES)
OOB_METHODS = ("platt", "iso", "beta", "va", "ppa", "rank")
METRICS = ("accuracy", "brier", "brier_pos", "log_loss", "ece", "tce")
DEFAULT_METRICS = ("accuracy", "brier", "brier_pos", "log_loss", "ece")
HIGHER_IS_BETTER = frozenset({"accuracy"})
SEARCH_OBJECTIVES = ("brier", "log_loss", "accuracy", "ece")
LARGE_FACTOR = 5

_TAG_FOLDS, _TAG_CELL, _TAG_SEARCH = 1, 2, 3
_FAILURES = (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError)


class StratificationError(InvalidInputError):
    pass


def derive_seed(*parts) -> int:
    """64-bit seed mixed from integer parts through SeedSequence."""
    words = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def dataset_key(dataset_id: str) -> int:
    return zlib.crc32(str(dataset_id).encode("utf-8"))


def stratified_kfold(labels, k: int, seed) -> List[np.ndarray]:
    """Split row indices into ``k`` folds with per-class counts differing by at most one.

    Each class is shuffled, the classes are laid end to end, and positions are
    dealt round-robin so fold sizes are balanced too.
    """
    y = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise InvalidInputError("k must be at least 2")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    for c, n in zip(classes, counts):
        if n < k:
            raise StratificationError(f"class {c} has {n} rows, fewer than k={k} folds")
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in classes])
    assignment = np.empty(y.size, dtype=np.int64)
    assignment[order] = np.arange(y.size) % k
    return [np.flatnonzero(assignment == f) for f in range(k)]


@dataclass(frozen=True)
class SearchSpace:
    """Random-forest hyper-parameter grid sampled uniformly per dimension."""

    criterion: Tuple[str, ...] = ("gini", "entropy")
    max_depth: Tuple[int, int] = (2, 100)
    min_samples_split: Tuple[int, int] = (2, 10)
    min_samples_leaf: Tuple[int, int] = (1, 10)
    max_features: Tuple[str, ...] = ("sqrt", "log2", "all")
    class_weight: Tuple[Optional[str], ...] = (None, "balanced", "balanced_subsample")
    laplace: Tuple[bool, ...] = (False, True)
    n_trees: int = 100

    def sample(self, rng: np.random.Generator) -> rf.ForestConfig:
        def pick(options):
            return options[int(rng.integers(len(options)))]

        return rf.ForestConfig(
            n_trees=self.n_trees,
            criterion=pick(self.criterion),
            max_depth=int(rng.integers(self.max_depth[0], self.max_depth[1] + 1)),
            min_samples_split=int(rng.integers(self.min_samples_split[0], self.min_samples_split[1] + 1)),
            min_samples_leaf=int(rng.integers(self.min_samples_leaf[0], self.min_samples_leaf[1] + 1)),
            max_features=pick(self.max_features),
            class_weight=pick(self.class_weight),
            laplace=bool(pick(self.laplace)),
        )


def _objective(P, y, objective, bins=20):
    if objective == "brier":
        return float(np.mean(mt.brier(P, y)))
    if objective == "log_loss":
        return float(np.mean(mt.log_loss(P, y)))
    if objective == "accuracy":
        return -mt.accuracy(P, y)
    if objective == "ece":
        return mt.ece(P, y, bins)
    raise InvalidInputError(f"search objective must be one of {SEARCH_OBJECTIVES}")


def hyperparameter_search(train: Dataset, space: SearchSpace = SearchSpace(), iterations: int = 50,
                          seed=0, folds: int = 5, objective: str = "brier",
                          return_scores: bool = False):
    """Randomized search scored by mean ``folds``-fold CV objective; ties keep the first draw."""
    if iterations < 1:
        raise InvalidInputError("iterations must be positive")
    if objective not in SEARCH_OBJECTIVES:
        raise InvalidInputError(f"search objective must be one of {SEARCH_OBJECTIVES}")
    rng = np.random.default_rng(seed)
    candidates = [space.sample(rng) for _ in range(iterations)]
    split = stratified_kfold(train.labels, folds, derive_seed(seed, _TAG_FOLDS))
    scores = []
    for i, cfg in enumerate(candidates):
        cfg = cfg.replace(seed=derive_seed(seed, _TAG_SEARCH, i))
        fold_scores = []
        for f in range(folds):
            inner_train = train.subset(np.concatenate([split[j] for j in range(folds) if j != f]))
            held = train.subset(split[f])
            model = rf.train_forest(inner_train, cfg)
            fold_scores.append(_objective(rf.predict_forest(model, held.features), held.labels, objective))
        scores.append(float(np.mean(fold_scores)))
        candidates[i] = cfg
    best = int(np.argmin(scores))
    return (candidates[best], scores) if return_scores else candidates[best]


@dataclass(frozen=True)
class ExperimentConfig:
    """Cross-validated benchmark definition.

    ``laplace`` overrides the Laplace flag of every forest when set.
    ``calibration_source`` is ``"fold"`` (a held-out fold) or ``"oob"``
    (out-of-bag predictions on the training rows, with the calibration fold
    returned to training).
    """

    datasets: Tuple[str, ...] = ()
    methods: Tuple[str, ...] = METHODS
    folds: int = 10
    repeats: int = 5
    seed: int = 0
    calibration_source: str = "fold"
    ece_bins: int = 20
    search_iterations: int = 50
    search_folds: int = 5
    search_objective: str = "brier"
    search_per_fold: bool = False
    search_space: SearchSpace = SearchSpace()
    forest: rf.ForestConfig = rf.ForestConfig()
    laplace: Optional[bool] = None
    metrics: Tuple[str, ...] = DEFAULT_METRICS

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if self.folds < 3:
            raise InvalidInputError("folds must be at least 3 (test, calibration and training)")
        if self.repeats < 1:
            raise InvalidInputError("repeats must be at least 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise InvalidInputError(f"unknown method(s) {bad}; valid: {', '.join(METHODS)}")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise InvalidInputError(f"unknown metric(s) {bad}; valid: {', '.join(METRICS)}")
        if self.calibration_source not in ("fold", "oob"):
            raise InvalidInputError("calibration_source must be 'fold' or 'oob'")
        if self.search_objective not in SEARCH_OBJECTIVES:
            raise InvalidInputError(f"search objective must be one of {SEARCH_OBJECTIVES}")
        if self.ece_bins < 1:
            raise InvalidInputError("ece_bins must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return ExperimentConfig(**values)


@dataclass(frozen=True)
class Record:
    dataset: str
    method: str
    repeat: int
    fold: int
    metric: str
    value: float


@dataclass(frozen=True)
class Failure:
    dataset: str
    method: str
    repeat: int
    fold: int
    error: str


@dataclass
class ResultsTable:
    records: List[Record] = field(default_factory=list)
    failures: List[Failure] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.records))

    def datasets(self) -> List[str]:
        return list(dict.fromkeys(r.dataset for r in self.records))

    def metrics(self) -> List[str]:
        return list(dict.fromkeys(r.metric for r in self.records))

    def values(self, method: str, metric: str, dataset: str = None) -> np.ndarray:
        """Values in table order for one (method, metric), optionally one dataset."""
        return np.array([r.value for r in self.records if r.method == method and r.metric == metric
                         and (dataset is None or r.dataset == dataset)])

    def cell_values(self, method: str, metric: str) -> Dict[tuple, float]:
        return {(r.dataset, r.repeat, r.fold): r.value for r in self.records
                if r.method == method and r.metric == metric}

    def mean_table(self, metric: str) -> Dict[str, Dict[str, float]]:
        """{dataset: {method: mean over repeats and folds}}."""
        sums: Dict[tuple, list] = {}
        for r in self.records:
            if r.metric == metric:
                sums.setdefault((r.dataset, r.method), []).append(r.value)
        out: Dict[str, Dict[str, float]] = {}
        for (d, m), v in sums.items():
            out.setdefault(d, {})[m] = float(np.mean(v))
        return out

    def score_matrix(self, metric: str, methods: Sequence[str] = None):
        """(datasets, methods, N x m matrix of mean scores) over datasets complete for ``methods``."""
        table = self.mean_table(metric)
        methods = list(methods) if methods is not None else self.methods()
        rows = [d for d in self.datasets() if all(m in table.get(d, {}) for m in methods)]
        S = np.array([[table[d][m] for m in methods] for d in rows]).reshape(len(rows), len(methods))
        return rows, methods, S

    def summary(self) -> dict:
        """Mean tables per metric with per-method mean and average rank rows."""
        out = {}
        for metric in self.metrics():
            datasets, methods, S = self.score_matrix(metric)
            entry = {"datasets": {d: dict(zip(methods, map(float, row))) for d, row in zip(datasets, S)}}
            if len(datasets):
                entry["mean"] = dict(zip(methods, map(float, S.mean(axis=0))))
                ranks = stats.average_ranks(S, lower_is_better=metric not in HIGHER_IS_BETTER)
                entry["rank"] = dict(zip(methods, map(float, ranks)))
            out[metric] = entry
        return {"metrics": out, "failures": [asdict(f) for f in self.failures]}


def score_predictions(P, labels, true_posteriors=None, metrics=DEFAULT_METRICS, bins=20) -> Dict[str, float]:
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if not np.all(np.isfinite(P)):
        raise InvalidInputError("predictions contain non-finite values")
    out = {}
    for m in metrics:
        if m == "accuracy":
            out[m] = mt.accuracy(P, labels)
        elif m == "brier":
            out[m] = float(np.mean(mt.brier(P, labels)))
        elif m == "brier_pos":
            out[m] = float(np.mean(mt.binary_brier(P, labels)))
        elif m == "log_loss":
            out[m] = float(np.mean(mt.log_loss(P, labels)))
        elif m == "ece":
            out[m] = mt.ece(P, labels, bins)
        elif m == "tce":
            if true_posteriors is None:
                raise InvalidInputError("tce needs true posteriors")
            out[m] = float(np.mean(mt.tce(P, true_posteriors)))
        else:
            raise InvalidInputError(f"unknown metric {m!r}")
    return out


def evaluate_methods(methods: Sequence[str], base_config: rf.ForestConfig, train: Dataset,
                     calib: Optional[Dataset], test: Dataset, opt_config: rf.ForestConfig = None,
                     oob: bool = False) -> Dict[str, object]:
    """Test-set predictions of every method, or the exception that stopped it.

    The base forest (``rf_d``) is trained on ``train`` and every calibrator
    is fitted on top of it, using ``calib`` or, with ``oob``, the base
    forest's out-of-bag predictions on ``train``.
    """
    base = rf.train_forest(train, base_config)
    base_test = rf.predict_forest(base, test.features)
    if oob:
        X_cal, y_cal = train.features, train.labels
    elif calib is not None:
        X_cal, y_cal = calib.features, calib.labels
    else:
        X_cal = y_cal = None
    cal_probs = None
    out: Dict[str, object] = {}
    for method in methods:
        try:
            if method == "rf_d":
                P = base_test
            elif method == "rf_large":
                big = rf.train_forest(train, base_config.replace(n_trees=LARGE_FACTOR * base_config.n_trees))
                P = rf.predict_forest(big, test.features)
            elif method == "rf_opt":
                if opt_config is None:
                    raise InvalidInputError("rf_opt needs a searched configuration")
                P = rf.predict_forest(rf.train_forest(train, opt_config), test.features)
            else:
                if X_cal is None:
                    raise InvalidInputError(f"{method} needs calibration data")
                if cal_probs is None and method not in ("ct", "rank"):
                    cal_probs = rf.oob_predict(base, X_cal) if oob else rf.predict_forest(base, X_cal)
                rank_forest = (cal.train_rank_forest(train, base_config, base_forest=base)
                               if method == "rank" else None)
                model = cal.fit_calibrator(method, base, X_cal, y_cal, cal_probs, rank_forest, oob)
                P = model.predict_proba(base_test, test.features)
            out[method] = P
        except _FAILURES as exc:
            out[method] = exc
    return out


def _with_laplace(config: rf.ForestConfig, laplace):
    return config if laplace is None else config.replace(laplace=bool(laplace))


def _cell_split(folds, i, oob):
    k = len(folds)
    test = folds[i]
    calib = folds[(i + 1) % k]
    rest = [folds[j] for j in range(k) if j != i and (oob or j != (i + 1) % k)]
    return np.sort(np.concatenate(rest)), np.sort(calib), np.sort(test)


def cell_indices(config: ExperimentConfig, dataset_id: str, labels, repeat: int, fold: int):
    """(train, calibration, test) row indices of one cell; calibration rows join training under OOB."""
    folds = stratified_kfold(labels, config.folds,
                             derive_seed(_TAG_FOLDS, config.seed, dataset_key(dataset_id), repeat))
    return _cell_split(folds, fold, config.calibration_source == "oob")


def _search_for(config, dataset_id, data, repeat, train_rows):
    seed = derive_seed(_TAG_SEARCH, config.seed, dataset_key(dataset_id), repeat)
    best = hyperparameter_search(data.subset(train_rows), config.search_space, config.search_iterations,
                                 seed, config.search_folds, config.search_objective)
    return _with_laplace(best, config.laplace)


def _run_cell(config, dataset_id, data, repeat, fold, opt_config):
    oob = config.calibration_source == "oob"
    train_rows, cal_rows, test_rows = cell_indices(config, dataset_id, data.labels, repeat, fold)
    seed = derive_seed(_TAG_CELL, config.seed, dataset_key(dataset_id), repeat, fold)
    base_cfg = _with_laplace(config.forest, config.laplace).replace(seed=seed)
    records, failures = [], []
    try:
        if "rf_opt" in config.methods and (opt_config is None or config.search_per_fold):
            opt_config = _search_for(config, dataset_id, data, repeat, train_rows)
        if opt_config is not None:
            opt_config = opt_config.replace(seed=seed)
        test = data.subset(test_rows)
        preds = evaluate_methods(config.methods, base_cfg, data.subset(train_rows),
                                 None if oob else data.subset(cal_rows), test, opt_config, oob)
    except _FAILURES as exc:
        preds = {m: exc for m in config.methods}
    for method in config.methods:
        P = preds[method]
        if not isinstance(P, Exception):
            try:
                scores = score_predictions(P, test.labels, test.true_posteriors, config.metrics,
                                           config.ece_bins)
            except _FAILURES as exc:
                P = exc
            else:
                records.extend(Record(dataset_id, method, repeat, fold, m, scores[m])
                               for m in config.metrics)
        if isinstance(P, Exception):
            failures.append(Failure(dataset_id, method, repeat, fold, f"{type(P).__name__}: {P}"))
    return records, failures


def sort_table(table: ResultsTable, config: ExperimentConfig) -> ResultsTable:
    d_idx = {d: i for i, d in enumerate(config.datasets)}
    m_idx = {m: i for i, m in enumerate(config.methods)}
    k_idx = {m: i for i, m in enumerate(config.metrics)}
    recs = sorted(table.records, key=lambda r: (d_idx.get(r.dataset, len(d_idx)), r.dataset, r.repeat,
                                                r.fold, m_idx[r.method], k_idx[r.metric]))
    fails = sorted(table.failures, key=lambda f: (d_idx.get(f.dataset, len(d_idx)), f.dataset,
                                                  f.repeat, f.fold, m_idx[f.method]))
    return ResultsTable(recs, fails)


def run_experiment(config: ExperimentConfig, datasets: Mapping[str, Dataset] = None,
                   threads: int = 1) -> ResultsTable:
    """Run every (dataset, repeat, fold) cell and collect one record per method and metric.

    ``datasets`` maps ids to data; when omitted each id is read as a CSV path.
    Cells run on up to ``threads`` worker threads.
    """
    if datasets is None:
        from rfcal.io import load_csv
        datasets = {d: load_csv(d) for d in config.datasets}
    ids = list(config.datasets) or list(datasets)
    if not ids:
        raise InvalidInputError("no datasets configured")
    config = config.replace(datasets=tuple(ids))
    for d in ids:
        if d not in datasets:
            raise InvalidInputError(f"dataset {d!r} was not supplied")
        if "tce" in config.metrics and datasets[d].true_posteriors is None:
            raise InvalidInputError(f"metric tce needs true posteriors, dataset {d!r} has none")

    searched: Dict[tuple, object] = {}
    if "rf_opt" in config.methods and not config.search_per_fold:
        jobs = [(d, r) for d in ids for r in range(config.repeats)]

        def search(job):
            d, r = job
            train_rows = cell_indices(config, d, datasets[d].labels, r, 0)[0]
            try:
                return _search_for(config, d, datasets[d], r, train_rows)
            except _FAILURES as exc:
                return exc

        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            searched = dict(zip(jobs, pool.map(search, jobs)))

    cells = [(d, r, f) for d in ids for r in range(config.repeats) for f in range(config.folds)]

    def work(cell):
        d, r, f = cell
        opt = searched.get((d, r))
        if isinstance(opt, Exception):
            recs, fails = _run_cell(config.replace(methods=tuple(m for m in config.methods if m != "rf_opt")),
                                    d, datasets[d], r, f, None)
            fails.append(Failure(d, "rf_opt", r, f, f"{type(opt).__name__}: {opt}"))
            return recs, fails
        return _run_cell(config, d, datasets[d], r, f, opt)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, cells))
    else:
        results = [work(c) for c in cells]
    table = ResultsTable([x for recs, _ in results for x in recs],
                         [x for _, fails in results for x in fails])
    return sort_table(table, config)


# -- significance ---------------------------------------------------------

def significance_table(table_a: ResultsTable, table_b: ResultsTable, methods: Sequence[str],
                       metrics: Sequence[str], alpha: float = 0.05, pair_by: str = "dataset") -> List[dict]:
    """Paired t-test of ``a`` versus ``b`` per (method, metric).

    ``pair_by="dataset"`` pairs per-dataset means; ``"cell"`` pairs every
    (dataset, repeat, fold) cell.  ``direction`` is +1 when ``a`` has the
    larger mean value.  Rows whose differences are degenerate carry
    ``status="degenerate"`` and no statistic.
    """
    if pair_by not in ("dataset", "cell"):
        raise InvalidInputError("pair_by must be 'dataset' or 'cell'")
    rows = []
    for method in methods:
        for metric in metrics:
            if pair_by == "dataset":
                ta, tb = table_a.mean_table(metric), table_b.mean_table(metric)
                keys = [d for d in ta if method in ta[d] and d in tb and method in tb[d]]
                a = [ta[d][method] for d in keys]
                b = [tb[d][method] for d in keys]
            else:
                ca, cb = table_a.cell_values(method, metric), table_b.cell_values(method, metric)
                keys = sorted(set(ca) & set(cb))
                a = [ca[k] for k in keys]
                b = [cb[k] for k in keys]
            row = {"method": method, "metric": metric, "n": len(keys),
                   "mean_a": float(np.mean(a)) if a else math.nan,
                   "mean_b": float(np.mean(b)) if b else math.nan}
            try:
                res = stats.paired_ttest(a, b, alpha)
            except InvalidInputError as exc:
                row.update(t=math.nan, p=math.nan, significant=False, direction=0,
                           status="degenerate", note=str(exc))
            else:
                better = res.direction if metric in HIGHER_IS_BETTER else -res.direction
                row.update(t=res.t, p=res.p, significant=res.significant, direction=res.direction,
                           a_better=bool(res.significant and better > 0), status="ok")
            rows.append(row)
    return rows


def compare_laplace(config: ExperimentConfig, datasets=None, threads: int = 1, alpha: float = 0.05,
                    pair_by: str = "dataset"):
    """Run the experiment with Laplace on (``a``) and off (``b``) and t-test every method and metric."""
    on = run_experiment(config.replace(laplace=True), datasets, threads)
    off = run_experiment(config.replace(laplace=False), datasets, threads)
    return significance_table(on, off, config.methods, config.metrics, alpha, pair_by)


def compare_oob(config: ExperimentConfig, datasets=None, threads: int = 1, alpha: float = 0.05,
                pair_by: str = "dataset"):
    """OOB calibration (``a``) against a held-out calibration fold (``b``)."""
    methods = tuple(m for m in config.methods if m in OOB_METHODS) or OOB_METHODS
    cfg = config.replace(methods=methods)
    oob = run_experiment(cfg.replace(calibration_source="oob"), datasets, threads)
    fold = run_experiment(cfg.replace(calibration_source="fold"), datasets, threads)
    return significance_table(oob, fold, methods, config.metrics, alpha, pair_by)


def rank_summary(table: ResultsTable, metric: str, methods: Sequence[str] = None,
                 alpha: float = 0.05) -> stats.RankSummary:
    datasets, methods, S = table.score_matrix(metric, methods)
    if not datasets:
        raise InvalidInputError(f"no dataset has results for every method under {metric!r}")
    R = stats.rank_matrix(S, lower_is_better=metric not in HIGHER_IS_BETTER)
    return stats.friedman_nemenyi(R, methods, alpha)


# -- sweeps ---------------------------------------------------------------

def synthetic_split(seed, d: int = 2, n_train: int = 1000, n_test: int = 1000, n_calib: int = 0):
    """Train (and optionally calibration) and test sets from one two-Gaussian draw."""
    train, s0, s1 = sg.sample_two_gaussians(d, n_train, seed, return_specs=True)
    test = sg.sample_gaussian_pair(s0, s1, n_test, derive_seed(seed, 1))
    calib = sg.sample_gaussian_pair(s0, s1, n_calib, derive_seed(seed, 2)) if n_calib else None
    return train, calib, test


def _forest_row(model, test, bins):
    P = rf.predict_forest(model, test.features)
    row = score_predictions(P, test.labels, test.true_posteriors, DEFAULT_METRICS + ("tce",), bins)
    row["groups"] = rf.count_unique_rows(P)
    return row


def depth_sweep(depths=(1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20, None), seeds=range(5), d: int = 2,
                n_train: int = 1000, n_test: int = 1000, config: rf.ForestConfig = rf.ForestConfig(),
                bins: int = 20) -> List[dict]:
    """Forest metrics on fresh two-Gaussian data for each ``max_depth`` (None = unbounded)."""
    rows = []
    for seed in seeds:
        train, _, test = synthetic_split(seed, d, n_train, n_test)
        for depth in depths:
            model = rf.train_forest(train, config.replace(max_depth=depth, seed=derive_seed(seed, 3)))
            rows.append({"depth": depth, "seed": seed, **_forest_row(model, test, bins)})
    return rows


def tree_sweep(tree_counts=(1, 2, 5, 10, 20, 50, 100, 200, 500), seeds=range(5), d: int = 2,
               n_train: int = 1000, n_test: int = 1000, config: rf.ForestConfig = rf.ForestConfig(),
               bins: int = 20) -> List[dict]:
    """Forest metrics for each ensemble size; smaller forests are prefixes of the largest."""
    rows = []
    for seed in seeds:
        train, _, test = synthetic_split(seed, d, n_train, n_test)
        full = rf.train_forest(train, config.replace(n_trees=max(tree_counts), seed=derive_seed(seed, 3)))
        for T in tree_counts:
            sub = rf.RandomForestModel(full.trees[:T], full.bootstrap_indices[:T], full.config.replace(n_trees=T),
                                       full.n_classes, full.n_features, full.oob_indices[:T])
            rows.append({"n_trees": T, "seed": seed, **_forest_row(sub, test, bins)})
    return rows


def _method_rows(preds, test, bins, extra):
    rows = []
    for method, P in preds.items():
        row = dict(extra, method=method)
        if isinstance(P, Exception):
            row["error"] = f"{type(P).__name__}: {P}"
        else:
            row.update(score_predictions(P, test.labels, test.true_posteriors,
                                         DEFAULT_METRICS + ("tce",), bins))
        rows.append(row)
    return rows


def calibration_size_sweep(train: Dataset, calib_pool: Dataset, test: Dataset,
                           fractions=(0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0),
                           methods: Sequence[str] = CALIBRATORS, config: rf.ForestConfig = rf.ForestConfig(),
                           seed=0, bins: int = 20) -> List[dict]:
    """Fit calibrators on growing prefixes of one shuffled calibration pool.

    The prefix for fraction f holds ceil(f * |pool|) rows, so every smaller
    calibration set is contained in every larger one.
    """
    order = np.random.default_rng(seed).permutation(calib_pool.n_rows)
    rows = []
    for f in fractions:
        if not 0 < f <= 1:
            raise InvalidInputError("fractions must lie in (0, 1]")
        n = max(1, math.ceil(f * calib_pool.n_rows - 1e-9))
        calib = calib_pool.subset(order[:n])
        preds = evaluate_methods(methods, config.replace(seed=derive_seed(seed, 3)), train, calib, test)
        rows.extend(_method_rows(preds, test, bins, {"fraction": float(f), "n_calib": n}))
    return rows


def overlap_experiment(dims=(2,), seeds=range(5), steps: int = 20, target: float = sg.DEFAULT_TARGET_BD,
                       n: int = 1000, methods: Sequence[str] = ("rf_d",) + CALIBRATORS,
                       config: rf.ForestConfig = rf.ForestConfig(), bins: int = 20) -> List[dict]:
    """Methods across the overlap sweep; each step trains on the step sample and
    calibrates and tests on fresh draws from the same class specs."""
    rows = []
    for d in dims:
        for seed in seeds:
            for st in sg.overlap_sweep(sg.OverlapSweepSpec(d, steps, target, n, seed)):
                s_seed = derive_seed(seed, d, st.step)
                calib = sg.sample_gaussian_pair(st.spec0, st.spec1, n, derive_seed(s_seed, 1))
                test = sg.sample_gaussian_pair(st.spec0, st.spec1, n, derive_seed(s_seed, 2))
                preds = evaluate_methods(methods, config.replace(seed=derive_seed(s_seed, 3)), st.data,
                                         calib, test)
                rows.extend(_method_rows(preds, test, bins, {"dim": d, "seed": seed, "step": st.step,
                                                             "shift": st.shift, "distance": st.distance}))
    return rows
