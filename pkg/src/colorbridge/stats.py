"""Evaluation statistics: AUC, paired t-tests, multiple-comparison control.

The ROC AUC uses the rank formulation of the Mann-Whitney statistic with
midranks for ties (O(n log n)).  The Student-t CDF is evaluated through a
continued-fraction regularized incomplete beta, so no external stats
dependency is needed at runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "roc_auc",
    "AucResult",
    "mean_auc",
    "PairedTTestResult",
    "paired_t_test",
    "student_t_cdf",
    "BhResult",
    "benjamini_hochberg",
    "RunAggregate",
    "aggregate_runs",
    "format_mean_std",
]


def _midranks(values):
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # group [i, j] shares the midrank (i+1 + j+1) / 2
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels):
    """Probability a random positive outscores a random negative (ties count 1/2).

    ``labels`` must contain both classes (0 and 1), otherwise the AUC is
    undefined and a ValueError is raised.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"roc_auc: {scores.shape[0]} scores vs {labels.shape[0]} labels")
    if scores.size == 0:
        raise ValueError("roc_auc: empty input")
    if not np.isfinite(scores).all():
        raise ValueError("roc_auc: non-finite score")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC undefined: single-class labels (pos={n_pos}, neg={n_neg})")
    ranks = _midranks(scores)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class AucResult:
    per_observation: tuple
    mean: float


def mean_auc(per_observation):
    """Arithmetic mean over per-observation AUCs."""
    values = [float(v) for v in per_observation]
    if not values:
        raise ValueError("mean_auc: no per-observation values")
    return AucResult(per_observation=tuple(values), mean=sum(values) / len(values))


def _contfrac_betainc(a, b, x):
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b) to better than 1e-10 absolute accuracy."""
    if a <= 0 or b <= 0:
        raise ValueError(f"incomplete beta requires positive a, b; got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"incomplete beta requires x in [0, 1]; got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # Use the symmetry relation on the side where the fraction converges fast.
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _contfrac_betainc(a, b, x) / a
    return 1.0 - front * _contfrac_betainc(b, a, 1.0 - x) / b


def student_t_cdf(t, dof):
    """CDF of Student's t distribution with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError(f"student_t_cdf: dof must be positive, got {dof}")
    t = float(t)
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    x = dof / (dof + t * t)
    tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class PairedTTestResult:
    t: float
    dof: int
    p_two_sided: float


def paired_t_test(a, b):
    """Two-sided paired t-test on matched samples.

    Degenerate conventions: identical samples give p=1; zero-variance
    nonzero differences give p=0 (with t reported as +/-inf).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired_t_test: length mismatch {a.shape[0]} vs {b.shape[0]}")
    n = a.size
    if n < 2:
        raise ValueError(f"paired_t_test: needs at least 2 pairs, got {n}")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return PairedTTestResult(t=0.0, dof=dof, p_two_sided=1.0)
        return PairedTTestResult(t=math.copysign(math.inf, mean), dof=dof, p_two_sided=0.0)
    t = mean / (sd / math.sqrt(n))
    # Two-sided p folds both tails: p = I_{dof/(dof+t^2)}(dof/2, 1/2).
    p = regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return PairedTTestResult(t=float(t), dof=dof, p_two_sided=float(min(1.0, p)))


@dataclass(frozen=True)
class BhResult:
    adjusted_p: tuple
    reject: tuple


def benjamini_hochberg(p_values, alpha=0.05):
    """Step-up FDR control; rejects hypotheses with adjusted p < alpha.

    adjusted_(i) = min over j >= i of min(1, p_(j) * m / j) in sorted order.
    """
    p = np.asarray(p_values, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("benjamini_hochberg: empty p-value list")
    if np.any((p < 0) | (p > 1)) or not np.isfinite(p).all():
        raise ValueError("benjamini_hochberg: p-values must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ValueError(f"benjamini_hochberg: alpha must be in (0, 1), got {alpha}")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted_sorted = np.minimum(1.0, np.minimum.accumulate(scaled[::-1])[::-1])
    adjusted = np.empty(m, dtype=np.float64)
    adjusted[order] = adjusted_sorted
    reject = adjusted < alpha
    return BhResult(adjusted_p=tuple(adjusted.tolist()), reject=tuple(bool(r) for r in reject))


@dataclass(frozen=True)
class RunAggregate:
    values: tuple
    mean: float
    std: float

    def formatted(self):
        return format_mean_std(self.mean, self.std)


def aggregate_runs(values):
    """Mean and sample (n-1) standard deviation over repeated runs."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size < 2:
        raise ValueError(f"aggregate_runs: needs at least 2 runs, got {vals.size}")
    if vals.min() == vals.max():  # constant runs aggregate exactly
        return RunAggregate(values=tuple(vals.tolist()), mean=float(vals[0]), std=0.0)
    return RunAggregate(
        values=tuple(vals.tolist()),
        mean=float(vals.mean()),
        std=float(vals.std(ddof=1)),
    )


def format_mean_std(mean, std):
    """Render an AUC aggregate as percent: 0.784 +/- 0.005 -> '78.4 ± 0.5'."""
    return f"{100.0 * mean:.1f} ± {100.0 * std:.1f}"
