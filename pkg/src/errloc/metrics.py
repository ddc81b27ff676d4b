"""Score attention sets and strategies.

Per-set statistics, coverage step functions over a budget grid, the area
under the step function, build-to-eval generalizability, cross-split
stability, and TOPSIS aggregation of the three criteria.  Quantities with
an empty denominator are reported as None, not zero: an undefined rule is
a different outcome than a rule that matched nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, DatasetError
from .strategies import AttentionRule, AttentionSet, BudgetGrid, materialize

_EPS = 1e-12


@dataclass(frozen=True)
class AttentionStats:
    """Statistics of one attention set X on a dataset D.

    size        rows in X
    frac_size   size / N(D)
    error_count errors in X
    coverage    errors in X / errors in D
    error_rate  errors in X / size
    harmonic    harmonic mean of coverage and error_rate (0 if both 0)
    remainder_error_rate  error rate of D with X removed
    fixed_error_rate      error rate of D if every error in X were fixed
    """

    size: int | None
    frac_size: float | None
    error_count: int | None
    coverage: float | None
    error_rate: float | None
    harmonic: float | None
    remainder_error_rate: float | None
    fixed_error_rate: float | None

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "frac_size": self.frac_size,
            "error_count": self.error_count,
            "coverage": self.coverage,
            "error_rate": self.error_rate,
            "harmonic": self.harmonic,
            "remainder_error_rate": self.remainder_error_rate,
            "fixed_error_rate": self.fixed_error_rate,
        }


def undefined_stats() -> AttentionStats:
    """Stats of an undefined rule: every field is undefined, including size."""
    return AttentionStats(None, None, None, None, None, None, None, None)


def attention_stats(d: Dataset, attention) -> AttentionStats:
    """Compute the statistics block for an attention set on d.

    attention is an AttentionSet or a row-index collection; an empty set is
    legitimate (size 0, coverage 0) but its rate fields are undefined.
    """
    z = d._require_z()
    if isinstance(attention, AttentionSet):
        idx = attention.indices
    else:
        idx = np.unique(np.asarray(list(attention), dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= d.n_rows):
        raise DatasetError("attention index out of range")
    n = d.n_rows
    m_total = d.error_count
    size = int(idx.size)
    err = int((z[idx] == 0).sum()) if size else 0
    coverage = err / m_total if m_total > 0 else None
    error_rate = err / size if size > 0 else None
    if coverage is None or error_rate is None:
        harmonic = None
    elif coverage + error_rate == 0.0:
        harmonic = 0.0
    else:
        harmonic = 2.0 * coverage * error_rate / (coverage + error_rate)
    remainder = (m_total - err) / (n - size) if n - size > 0 else None
    return AttentionStats(
        size=size,
        frac_size=size / n,
        error_count=err,
        coverage=coverage,
        error_rate=error_rate,
        harmonic=harmonic,
        remainder_error_rate=remainder,
        fixed_error_rate=(m_total - err) / n,
    )


# -- step functions ------------------------------------------------------


@dataclass(frozen=True)
class StepFunction:
    """Per-budget attention statistics; None marks budgets with no rule."""

    budgets: tuple
    stats: tuple

    def __post_init__(self):
        if len(self.budgets) != len(self.stats):
            raise ValueError("budgets and stats must align")

    def defined_points(self):
        """(n, m) pairs at defined budgets: fractional size and coverage."""
        ns, ms = [], []
        for st in self.stats:
            if st is not None:
                ns.append(st.frac_size)
                ms.append(st.coverage)
        return np.asarray(ns, dtype=float), np.asarray(ms, dtype=float)

    def to_dict(self) -> dict:
        return {
            "budgets": list(self.budgets),
            "stats": [None if st is None else st.to_dict() for st in self.stats],
        }


def step_function(rule: AttentionRule, d: Dataset, grid: BudgetGrid) -> StepFunction:
    """Materialize the rule on d at every grid budget and record statistics.

    The grid must end at the rule's fit budget.  d must contain at least one
    error, otherwise coverage is meaningless.
    """
    if abs(grid.max_budget - rule.max_budget) > _EPS:
        raise ValueError("budget grid must end at the rule's fit budget")
    if d.error_count == 0:
        raise DatasetError("step_function needs a dataset with at least one error")
    stats = []
    for b in grid.budgets:
        att = materialize(rule, d, b)
        stats.append(None if att is None else attention_stats(d, att))
    return StepFunction(budgets=tuple(grid.budgets), stats=tuple(stats))


def auc(sf: StepFunction) -> float | None:
    """Area under the coverage step function, normalized by the last size.

    Sums m_i * (n_{i+1} - n_i) over consecutive defined points and divides
    by n_K, which charges the undefined span below the first point.  Fewer
    than two defined points, or n_K = 0, give None.
    """
    n, m = sf.defined_points()
    if n.size < 2 or n[-1] <= 0.0:
        return None
    area = float(np.sum(m[:-1] * np.diff(n)))
    return area / float(n[-1])


def generalizability(build_sf: StepFunction, eval_sf: StepFunction) -> float | None:
    """Squared build-to-eval coverage gap, relative to squared build coverage.

    0 means eval reproduces build exactly; 1 means eval coverage is zero
    everywhere.  None when no budget is defined on both sides or build
    coverage is identically zero.
    """
    if build_sf.budgets != eval_sf.budgets:
        raise ValueError("step functions live on different budget grids")
    gaps = []
    denom = []
    for sb, se in zip(build_sf.stats, eval_sf.stats):
        if sb is None or se is None:
            continue
        gaps.append(sb.coverage - se.coverage)
        denom.append(sb.coverage)
    if not gaps:
        return None
    denom_sum = float(np.sum(np.square(denom)))
    if denom_sum <= 0.0:
        return None
    return float(np.sum(np.square(gaps))) / denom_sum


def stability(sfs) -> float | None:
    """Variance of interpolated coverage across splits, averaged over budgets.

    At each grid budget b, every split whose step function spans b
    contributes its linearly interpolated coverage; the population variance
    of these values is damped by 1 / sqrt(#contributors) and averaged over
    budgets with at least one contributor.
    """
    sfs = list(sfs)
    if not sfs:
        return None
    budgets = sfs[0].budgets
    if any(sf.budgets != budgets for sf in sfs):
        raise ValueError("step functions live on different budget grids")
    points = [sf.defined_points() for sf in sfs]
    total = 0.0
    counted = 0
    for b in budgets:
        values = []
        for n, m in points:
            if n.size >= 1 and n[0] <= b <= n[-1]:
                values.append(float(np.interp(b, n, m)))
        if not values:
            continue
        counted += 1
        total += float(np.var(values)) / math.sqrt(len(values))
    if counted == 0:
        return None
    return total / counted


# -- aggregation ---------------------------------------------------------


def mean_over_splits(values):
    """(mean of defined values, count of undefined splits); mean None if all undefined."""
    defined = [v for v in values if v is not None]
    undefined = len(values) - len(defined)
    if not defined:
        return None, undefined
    return float(np.mean(defined)), undefined


def topsis(matrix, weights=(0.6, 0.2, 0.2), benefit=(True, False, False)) -> np.ndarray:
    """TOPSIS closeness scores for alternatives x criteria.

    Vector normalization, weighting, and distance to the ideal and
    anti-ideal points.  A column with no spread contributes nothing to
    either distance; an alternative equidistant at zero (all alternatives
    identical) scores 0.5, and a single alternative scores 1.0.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2:
        raise ValueError("matrix must be 2-D")
    if x.shape[1] != len(weights) or len(weights) != len(benefit):
        raise ValueError("weights and benefit flags must match the criteria count")
    if np.isnan(x).any():
        raise ValueError("matrix must not contain undefined entries")
    if x.shape[0] == 1:
        return np.array([1.0])
    norms = np.sqrt((x * x).sum(axis=0))
    r = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    v = r * np.asarray(weights, dtype=float)
    ideal = np.where(benefit, v.max(axis=0), v.min(axis=0))
    anti = np.where(benefit, v.min(axis=0), v.max(axis=0))
    d_plus = np.sqrt(((v - ideal) ** 2).sum(axis=1))
    d_minus = np.sqrt(((v - anti) ** 2).sum(axis=1))
    span = d_plus + d_minus
    return np.divide(d_minus, span, out=np.full_like(span, 0.5), where=span > 0)


def best_harmonic_curve(mcr: float, frac_sizes) -> np.ndarray:
    """Best achievable harmonic score at each attention-set fraction.

    Below the error rate mcr the set can hold errors only; above it, all
    errors plus padding.  The curve peaks at exactly 1.0 when the fraction
    equals mcr.
    """
    if not 0.0 < mcr <= 1.0:
        raise ValueError("mcr must lie in (0, 1]")
    n = np.asarray(frac_sizes, dtype=float)
    if (n < 0).any() or (n > 1).any():
        raise ValueError("fractions must lie in [0, 1]")
    return np.where(n <= mcr, 2.0 * n / (n + mcr), 2.0 * mcr / (n + mcr))
