"""Significance testing: paired t-test, average ranks, Friedman and Nemenyi.

The t and chi-square tail probabilities are computed internally from the
regularized incomplete beta and gamma functions, so no statistics package
is required at runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from rfcal.dataset import InvalidInputError

# Studentized range at infinite degrees of freedom divided by sqrt(2), m = 2..20.
NEMENYI_Q = {
    0.05: (1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030879,
           3.101730, 3.163684, 3.218654, 3.268004, 3.312739, 3.353618, 3.391230,
           3.426041, 3.458425, 3.488685, 3.517073, 3.543799),
    0.10: (1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884,
           2.854606, 2.919889, 2.977768, 3.029694, 3.076733, 3.119693, 3.159199,
           3.195743, 3.229723, 3.261461, 3.291224, 3.319233),
}

_EPS = 1e-16
_TINY = 1e-300


def _betacf(a, b, x, max_iter=500):
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise InvalidInputError("betainc needs positive shape parameters")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbt = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
           + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise InvalidInputError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 < df:
        # complement form keeps precision when df / (df + t^2) rounds to 1
        return 1.0 - betainc(0.5, 0.5 * df, t2 / (df + t2))
    return betainc(0.5 * df, 0.5, df / (df + t2))


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise InvalidInputError("gammaincc needs a positive shape")
    if x <= 0:
        return 1.0
    lead = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        term = total = 1.0 / a
        ap = a
        for _ in range(10000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * _EPS:
                break
        return 1.0 - total * math.exp(lead)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(lead) * h


def chi2_sf(x: float, df: int) -> float:
    return gammaincc(0.5 * df, 0.5 * x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    direction: int  # +1 when a > b on average, -1 when a < b


def paired_ttest(values_a, values_b, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    Raises:
        InvalidInputError: unequal lengths, fewer than two pairs, or
            differences with zero variance (including identical inputs).
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("paired samples must be 1-D with equal lengths")
    n = a.size
    if n < 2:
        raise InvalidInputError("paired t-test needs at least two pairs")
    diff = a - b
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0:
        raise InvalidInputError("differences have zero variance; the t statistic is undefined")
    t = float(np.mean(diff) / (sd / math.sqrt(n)))
    p = t_sf_two_sided(t, n - 1)
    return TTestResult(t, p, p < alpha, int(np.sign(t)))


def midranks(values, lower_is_better: bool = True) -> np.ndarray:
    """Ranks 1..m with ties sharing the average of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    key = v if lower_is_better else -v
    order = np.argsort(key, kind="mergesort")
    ranks = np.empty(v.size)
    sorted_key = key[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_key[j + 1] == sorted_key[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_matrix(scores, lower_is_better: bool = True) -> np.ndarray:
    """Per-row midranks of an (N datasets, m methods) score matrix."""
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return np.vstack([midranks(row, lower_is_better) for row in S])


def average_ranks(scores, lower_is_better: bool = True) -> np.ndarray:
    """Mean rank of each method (column) over datasets (rows)."""
    return rank_matrix(scores, lower_is_better).mean(axis=0)


def nemenyi_q(m: int, alpha: float = 0.05) -> float:
    if alpha not in NEMENYI_Q:
        raise InvalidInputError(f"alpha must be one of {sorted(NEMENYI_Q)}")
    if not 2 <= m <= 20:
        raise InvalidInputError("Nemenyi table covers 2 to 20 methods")
    return NEMENYI_Q[alpha][m - 2]


def critical_difference(m: int, n_datasets: int, alpha: float = 0.05) -> float:
    if n_datasets < 1:
        raise InvalidInputError("need at least one dataset")
    return nemenyi_q(m, alpha) * math.sqrt(m * (m + 1) / (6.0 * n_datasets))


@dataclass
class RankSummary:
    methods: List[str]
    mean_ranks: np.ndarray
    friedman: float
    p_value: float
    cd: float
    significant_pairs: List[tuple] = field(default_factory=list)
    groups: List[List[str]] = field(default_factory=list)

    def cd_diagram(self) -> Dict:
        """Methods ordered by mean rank plus maximal groups with a rank span below the CD."""
        order = np.argsort(self.mean_ranks, kind="mergesort")
        return {
            "methods": [self.methods[i] for i in order],
            "mean_ranks": [float(self.mean_ranks[i]) for i in order],
            "cd": float(self.cd),
            "friedman": float(self.friedman),
            "p_value": float(self.p_value),
            "groups": [list(g) for g in self.groups],
        }


def _cliques(methods, ranks, cd):
    order = np.argsort(ranks, kind="mergesort")
    r = ranks[order]
    spans = []
    for i in range(len(r)):
        j = i
        while j + 1 < len(r) and r[j + 1] - r[i] < cd:
            j += 1
        if j > i and not any(a <= i and j <= b for a, b in spans):
            spans.append((i, j))
    return [[methods[order[k]] for k in range(a, b + 1)] for a, b in spans]


def friedman_nemenyi(ranks, methods: Sequence[str] = None, alpha: float = 0.05) -> RankSummary:
    """Friedman statistic and Nemenyi post-hoc analysis of an (N, m) rank matrix."""
    R = np.atleast_2d(np.asarray(ranks, dtype=np.float64))
    N, m = R.shape
    if m < 2:
        raise InvalidInputError("need at least two methods")
    methods = list(methods) if methods is not None else [f"m{j}" for j in range(m)]
    if len(methods) != m:
        raise InvalidInputError("one method name per column is required")
    mean = R.mean(axis=0)
    stat = 12.0 * N / (m * (m + 1)) * (np.sum(mean ** 2) - m * (m + 1) ** 2 / 4.0)
    stat = 0.0 if abs(stat) < 1e-12 else float(stat)
    cd = critical_difference(m, N, alpha)
    pairs = [(methods[i], methods[j]) for i in range(m) for j in range(i + 1, m)
             if abs(mean[i] - mean[j]) >= cd]
    return RankSummary(methods, mean, stat, chi2_sf(stat, m - 1), cd, pairs,
                       _cliques(methods, mean, cd))
