"""Synthetic binary classification data with exactly known class posteriors.

Classes are diagonal-covariance Gaussians (or equal-weight mixtures of
them).  All densities are evaluated in log space so that far-apart classes
in 20 dimensions still produce finite, normalized posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from rfcal.dataset import Dataset, InvalidInputError

DEFAULT_TARGET_BD = 5.72


class SolverError(RuntimeError):
    """The shift solve failed to bracket the requested distance."""


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Axis-aligned Gaussian: mean vector and per-dimension variances."""

    mean: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        var = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if mean.shape != var.shape:
            raise InvalidInputError("mean and variances must have the same dimension")
        if np.any(var <= 0) or not np.all(np.isfinite(var)):
            raise InvalidInputError("variances must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = (X - self.mean) ** 2 / self.variances
        return -0.5 * (z.sum(axis=1) + np.sum(np.log(2 * np.pi * self.variances)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.variances) * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class MixtureSpec:
    """Weighted Gaussian components of one class; weights are normalized on construction."""

    components: Tuple[GaussianSpec, ...]
    weights: Tuple[float, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        w = np.asarray(self.weights, dtype=np.float64)
        if not comps or w.size != len(comps):
            raise InvalidInputError("mixture needs one weight per component")
        if np.any(w <= 0):
            raise InvalidInputError("mixture weights must be positive")
        if len({c.dim for c in comps}) != 1:
            raise InvalidInputError("mixture components must share a dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", tuple(float(v) for v in w / w.sum()))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def log_density(self, X) -> np.ndarray:
        parts = np.stack([np.log(w) + c.log_density(X)
                          for c, w in zip(self.components, self.weights)])
        return np.logaddexp.reduce(parts, axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        which = rng.choice(len(self.components), size=n, p=np.asarray(self.weights))
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            rows = np.flatnonzero(which == k)
            out[rows] = comp.sample(rows.size, rng)
        return out


@dataclass(frozen=True)
class OverlapSweepSpec:
    dim: int = 2
    steps: int = 20
    target: float = DEFAULT_TARGET_BD
    samples_per_step: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.steps < 2 or self.samples_per_step < 2:
            raise InvalidInputError("overlap sweep needs dim >= 1, steps >= 2, samples >= 2")
        if self.target < 0:
            raise InvalidInputError("target distance must be nonnegative")


def _posterior_from_logs(log0, log1, prior0):
    if not 0.0 < prior0 < 1.0:
        raise InvalidInputError("prior0 must lie strictly between 0 and 1")
    a = np.log(prior0) + log0
    b = np.log1p(-prior0) + log1
    norm = np.logaddexp(a, b)
    return np.column_stack([np.exp(a - norm), np.exp(b - norm)])


def true_posterior(x, spec0: GaussianSpec, spec1: GaussianSpec, prior0: float = 0.5) -> np.ndarray:
    """Bayes posterior (q0, q1) of one point, or an (n, 2) array for a matrix of points."""
    X = np.asarray(x, dtype=np.float64)
    q = _posterior_from_logs(spec0.log_density(X), spec1.log_density(X), prior0)
    return q[0] if X.ndim == 1 else q


def mixture_posterior(x, mixture0: MixtureSpec, mixture1: MixtureSpec, prior0: float = 0.5):
    X = np.asarray(x, dtype=np.float64)
    q = _posterior_from_logs(mixture0.log_density(X), mixture1.log_density(X), prior0)
    return q[0] if X.ndim == 1 else q


def bhattacharyya(spec0: GaussianSpec, spec1: GaussianSpec) -> float:
    """Closed-form Bhattacharyya distance between two diagonal Gaussians."""
    if spec0.dim != spec1.dim:
        raise InvalidInputError("specs must share a dimension")
    v = 0.5 * (spec0.variances + spec1.variances)
    dm = spec1.mean - spec0.mean
    maha = np.sum(dm * dm / v) / 8.0
    logdet = np.sum(np.log(v)) - 0.5 * (np.sum(np.log(spec0.variances)) + np.sum(np.log(spec1.variances)))
    return float(maha + 0.5 * logdet)


def _class_sizes(n: int) -> Tuple[int, int]:
    if n < 2:
        raise InvalidInputError("need at least one row per class")
    return n // 2, n // 2


def _assemble(X0, X1, rng, posterior_fn) -> Dataset:
    X = np.vstack([X0, X1])
    y = np.concatenate([np.zeros(len(X0), dtype=np.int64), np.ones(len(X1), dtype=np.int64)])
    perm = rng.permutation(len(y))
    X, y = X[perm], y[perm]
    return Dataset(X, y, 2, posterior_fn(X))


def sample_gaussian_pair(spec0: GaussianSpec, spec1: GaussianSpec, n: int, seed) -> Dataset:
    """Balanced sample from two fixed class specs (odd n drops one row) with posteriors."""
    n0, n1 = _class_sizes(n)
    rng = np.random.default_rng(seed)
    X0, X1 = spec0.sample(n0, rng), spec1.sample(n1, rng)
    return _assemble(X0, X1, rng, lambda X: true_posterior(X, spec0, spec1))


def draw_gaussian_specs(d: int, rng: np.random.Generator, mean0_range=(0.0, 1.0),
                        mean1_range=(1.0, 3.0), var_range=(1.0, 2.0)):
    """Class means from their uniform ranges and one shared variance vector."""
    if d < 1:
        raise InvalidInputError("dimension must be positive")
    m0 = rng.uniform(*mean0_range, size=d)
    m1 = rng.uniform(*mean1_range, size=d)
    var = rng.uniform(*var_range, size=d)
    return GaussianSpec(m0, var), GaussianSpec(m1, var.copy())


def sample_two_gaussians(d: int = 2, n: int = 1000, seed=0, mean0_range=(0.0, 1.0),
                         mean1_range=(1.0, 3.0), var_range=(1.0, 2.0), return_specs=False):
    """Two-class Gaussian dataset with specs drawn once per call.

    An odd ``n`` yields ``n - 1`` rows so the classes stay balanced.  With
    ``return_specs`` the class specs are returned too, for drawing further
    samples (e.g. a test set) from the same distribution.
    """
    rng = np.random.default_rng(seed)
    spec0, spec1 = draw_gaussian_specs(d, rng, mean0_range, mean1_range, var_range)
    n0, n1 = _class_sizes(n)
    data = _assemble(spec0.sample(n0, rng), spec1.sample(n1, rng), rng,
                     lambda X: true_posterior(X, spec0, spec1))
    return (data, spec0, spec1) if return_specs else data


def solve_shift(base: GaussianSpec, variances1, target: float, lo: float = 0.0,
                hi: float = 100.0, tol: float = 1e-9, max_steps: int = 200) -> float:
    """Shift s along the all-ones direction making the distance equal ``target``."""
    ones = np.ones(base.dim)

    def dist(s):
        return bhattacharyya(base, GaussianSpec(base.mean + s * ones, variances1))

    if not dist(lo) <= target <= dist(hi):
        raise SolverError(f"target distance {target} is not bracketed by shifts [{lo}, {hi}]")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        if dist(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            return 0.5 * (lo + hi)
    raise SolverError("bisection did not converge")


@dataclass(frozen=True)
class SweepStep:
    step: int
    shift: float
    distance: float
    spec0: GaussianSpec = field(repr=False)
    spec1: GaussianSpec = field(repr=False)
    data: Dataset = field(repr=False)


def overlap_sweep(spec: OverlapSweepSpec = OverlapSweepSpec()) -> List[SweepStep]:
    """Redraw a balanced sample at each of ``spec.steps`` linearly spaced mean shifts.

    The last shift is solved so the class distance equals ``spec.target``.
    """
    root = np.random.SeedSequence(spec.seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    base = rng.uniform(0.0, 1.0, size=spec.dim)
    var = rng.uniform(1.0, 2.0, size=spec.dim)
    spec0 = GaussianSpec(base, var)
    shift_max = solve_shift(spec0, var, spec.target)
    shifts = np.linspace(0.0, shift_max, spec.steps)
    step_seeds = np.random.SeedSequence(spec.seed, spawn_key=(1,)).spawn(spec.steps)
    out = []
    for i, s in enumerate(shifts):
        spec1 = GaussianSpec(base + s, var)
        out.append(SweepStep(i, float(s), bhattacharyya(spec0, spec1), spec0, spec1,
                             sample_gaussian_pair(spec0, spec1, spec.samples_per_step, step_seeds[i])))
    return out


def draw_mixture_specs(d: int, rng, clusters_per_class: int = 4, mean_range=(0.0, 20.0),
                       var_range=(1.0, 5.0)) -> Tuple[MixtureSpec, MixtureSpec]:
    if clusters_per_class < 1:
        raise InvalidInputError("need at least one cluster per class")
    mixtures = []
    for _ in range(2):
        comps = tuple(GaussianSpec(rng.uniform(*mean_range, size=d), rng.uniform(*var_range, size=d))
                      for _ in range(clusters_per_class))
        mixtures.append(MixtureSpec(comps, (1.0,) * clusters_per_class))
    return mixtures[0], mixtures[1]


def sample_mixture_pair(mixture0: MixtureSpec, mixture1: MixtureSpec, n: int, seed) -> Dataset:
    n0, n1 = _class_sizes(n)
    rng = np.random.default_rng(seed)
    return _assemble(mixture0.sample(n0, rng), mixture1.sample(n1, rng), rng,
                     lambda X: mixture_posterior(X, mixture0, mixture1))


def sample_mixture(d: int = 2, n: int = 2000, clusters_per_class: int = 4, seed=0,
                   mean_range=(0.0, 20.0), var_range=(1.0, 5.0), return_specs=False):
    """Two-class dataset where each class is an equal-weight Gaussian mixture."""
    rng = np.random.default_rng(seed)
    m0, m1 = draw_mixture_specs(d, rng, clusters_per_class, mean_range, var_range)
    n0, n1 = _class_sizes(n)
    data = _assemble(m0.sample(n0, rng), m1.sample(n1, rng), rng,
                     lambda X: mixture_posterior(X, m0, m1))
    return (data, m0, m1) if return_specs else data


def posterior_for(data_specs: Sequence, X) -> np.ndarray:
    """Recompute posteriors for ``X`` from a (spec0, spec1) pair of either family."""
    s0, s1 = data_specs
    if isinstance(s0, MixtureSpec):
        return mixture_posterior(np.atleast_2d(X), s0, s1)
    return true_posterior(np.atleast_2d(X), s0, s1)
