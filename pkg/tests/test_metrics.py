import math

import numpy as np
import pytest

from errloc.dataset import DatasetError, subset
from errloc.metrics import (
    AttentionStats,
    StepFunction,
    attention_stats,
    auc,
    best_harmonic_curve,
    generalizability,
    mean_over_splits,
    stability,
    step_function,
    topsis,
    undefined_stats,
)
from errloc.slicing import Predicate, make_slice
from errloc.strategies import BudgetGrid, fit_random_subset, fit_rank_order, materialize
from synthdata import table1_dataset


def _pt(n, m):
    """A step-function point carrying only fractional size and coverage."""
    return AttentionStats(
        size=0,
        frac_size=n,
        error_count=0,
        coverage=m,
        error_rate=None,
        harmonic=None,
        remainder_error_rate=None,
        fixed_error_rate=None,
    )


def _sf(budgets, points):
    stats = tuple(None if p is None else _pt(*p) for p in points)
    return StepFunction(budgets=tuple(budgets), stats=stats)


# -- attention statistics ------------------------------------------------


def test_stats_first_reference_region():
    # 37 rows holding 13 of the 50 errors in a 1000-row table.
    d = table1_dataset()
    st = attention_stats(d, range(37))
    assert st.size == 37
    assert st.frac_size == pytest.approx(0.037)
    assert st.error_count == 13
    assert st.coverage == pytest.approx(0.26, abs=1e-12)
    assert st.error_rate == pytest.approx(0.351, abs=1e-3)
    assert st.harmonic == pytest.approx(0.299, abs=1e-3)
    assert st.remainder_error_rate == pytest.approx(37 / 963, abs=1e-12)
    assert st.fixed_error_rate == pytest.approx(0.037, abs=1e-12)


def test_stats_second_reference_region():
    # 99 rows holding 21 of the 50 errors.
    d = table1_dataset()
    st = attention_stats(d, range(99))
    assert st.coverage == pytest.approx(0.42, abs=1e-12)
    assert st.error_rate == pytest.approx(0.212, abs=1e-3)
    assert st.harmonic == pytest.approx(0.282, abs=1e-3)


def test_stats_full_set():
    d = table1_dataset()
    st = attention_stats(d, range(1000))
    assert st.size == 1000
    assert st.coverage == 1.0
    assert st.error_rate == pytest.approx(0.05)
    assert st.harmonic == pytest.approx(2 * 0.05 / 1.05, abs=1e-12)
    assert st.remainder_error_rate is None
    assert st.fixed_error_rate == 0.0


def test_stats_empty_set_is_defined_but_rateless():
    d = table1_dataset()
    st = attention_stats(d, [])
    assert st.size == 0
    assert st.frac_size == 0.0
    assert st.error_count == 0
    assert st.coverage == 0.0
    assert st.error_rate is None
    assert st.harmonic is None
    assert st.remainder_error_rate == pytest.approx(0.05)
    assert st.fixed_error_rate == pytest.approx(0.05)


def test_stats_error_free_attention_has_zero_harmonic():
    d = table1_dataset()
    st = attention_stats(d, range(200, 240))
    assert st.error_count == 0
    assert st.coverage == 0.0
    assert st.error_rate == 0.0
    assert st.harmonic == 0.0


def test_stats_deduplicates_and_bounds_indices():
    d = table1_dataset()
    st = attention_stats(d, [3, 1, 3, 1])
    assert st.size == 2
    with pytest.raises(DatasetError):
        attention_stats(d, [1000])
    with pytest.raises(DatasetError):
        attention_stats(d, [-1])


def test_undefined_stats_all_none():
    st = undefined_stats()
    assert all(v is None for v in st.to_dict().values())


def test_harmonic_never_exceeds_one():
    d = table1_dataset()
    rng = np.random.default_rng(4)
    for _ in range(25):
        k = int(rng.integers(1, 400))
        idx = rng.choice(1000, size=k, replace=False)
        st = attention_stats(d, idx)
        if st.harmonic is not None:
            assert 0.0 <= st.harmonic <= 1.0


# -- step functions ------------------------------------------------------


def _table1_rule(max_budget=0.20):
    d = table1_dataset()
    inner = make_slice(d, [Predicate.interval("x", 0.0, 36.0)], rank=0.9)
    outer = make_slice(d, [Predicate.interval("x", 0.0, 98.0)], rank=0.6)
    return d, fit_rank_order(d, [inner, outer], max_budget=max_budget)


def test_step_function_budget_sweep():
    d, rule = _table1_rule()
    sf = step_function(rule, d, BudgetGrid.uniform(0.20, 0.01))
    assert len(sf.budgets) == 20
    # Caps below 37 rows leave the rule undefined.
    assert sf.stats[0] is None and sf.stats[2] is None
    assert sf.stats[3].size == 37 and sf.stats[3].coverage == pytest.approx(0.26)
    assert sf.stats[8].size == 37
    assert sf.stats[9].size == 99 and sf.stats[9].coverage == pytest.approx(0.42)
    assert sf.stats[19].size == 99


def test_step_function_defined_points():
    sf = _sf((0.1, 0.2, 0.3), [None, (0.15, 0.3), (0.25, 0.6)])
    n, m = sf.defined_points()
    assert n.tolist() == [0.15, 0.25]
    assert m.tolist() == [0.3, 0.6]


def test_step_function_grid_must_match_rule_budget():
    d, rule = _table1_rule()
    with pytest.raises(ValueError):
        step_function(rule, d, BudgetGrid.uniform(0.10, 0.01))


def test_step_function_needs_errors():
    d, rule = _table1_rule()
    clean = subset(d, np.arange(500, 1000))
    assert clean.error_count == 0
    with pytest.raises(DatasetError):
        step_function(rule, clean, BudgetGrid.uniform(0.20, 0.01))


def test_step_function_round_trips_none_gaps():
    sf = _sf((0.1, 0.2), [None, (0.2, 0.4)])
    d = sf.to_dict()
    assert d["stats"][0] is None
    assert d["stats"][1]["coverage"] == 0.4


# -- area under the step function ----------------------------------------


def test_auc_reference_rule():
    # Coverage 0.26 from n=0.037 up to n=0.099, then 0.42: the area is
    # 0.26 * 0.062 normalized by 0.099.
    d, rule = _table1_rule()
    sf = step_function(rule, d, BudgetGrid.uniform(0.20, 0.01))
    assert auc(sf) == pytest.approx(806 / 4950, abs=1e-12)


def test_auc_full_coverage_step():
    sf = _sf((0.1, 0.2, 0.3), [(0.1, 1.0), (0.25, 1.0), (0.4, 1.0)])
    assert auc(sf) == pytest.approx((0.4 - 0.1) / 0.4, abs=1e-12)


def test_auc_needs_two_defined_points():
    assert auc(_sf((0.1, 0.2), [None, (0.2, 0.4)])) is None
    assert auc(_sf((0.1, 0.2), [None, None])) is None


def test_auc_rewards_earlier_coverage():
    late = _sf((0.1, 0.2, 0.3), [(0.1, 0.3), (0.25, 0.6), (0.4, 0.9)])
    early = _sf((0.1, 0.2, 0.3), [(0.05, 0.3), (0.2, 0.6), (0.4, 0.9)])
    assert auc(early) > auc(late)


def test_auc_constant_size_is_zero():
    sf = _sf((0.1, 0.2), [(0.15, 0.3), (0.15, 0.3)])
    assert auc(sf) == 0.0


# -- generalizability ----------------------------------------------------


def test_generalizability_identical_is_zero():
    b = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    assert generalizability(b, b) == 0.0


def test_generalizability_vanished_coverage_is_one():
    b = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    e = _sf((0.1, 0.2), [(0.1, 0.0), (0.2, 0.0)])
    assert generalizability(b, e) == pytest.approx(1.0, abs=1e-12)


def test_generalizability_hand_case():
    b = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    e = _sf((0.1, 0.2), [(0.1, 0.19), (0.2, 0.38)])
    expect = (0.01**2 + 0.02**2) / (0.2**2 + 0.4**2)
    assert generalizability(b, e) == pytest.approx(expect, abs=1e-12)
    single_b = _sf((0.1,), [(0.1, 0.2)])
    single_e = _sf((0.1,), [(0.1, 0.1)])
    assert generalizability(single_b, single_e) == pytest.approx(0.25, abs=1e-12)


def test_generalizability_penalizes_both_directions():
    b = _sf((0.1,), [(0.1, 0.2)])
    worse = _sf((0.1,), [(0.1, 0.1)])
    better = _sf((0.1,), [(0.1, 0.3)])
    assert generalizability(b, worse) == pytest.approx(generalizability(b, better))


def test_generalizability_skips_one_sided_budgets():
    b = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    e = _sf((0.1, 0.2), [None, (0.2, 0.3)])
    assert generalizability(b, e) == pytest.approx(0.1**2 / 0.4**2, abs=1e-12)


def test_generalizability_undefined_cases():
    b = _sf((0.1, 0.2), [(0.1, 0.2), None])
    e = _sf((0.1, 0.2), [None, (0.2, 0.3)])
    assert generalizability(b, e) is None
    zero = _sf((0.1,), [(0.1, 0.0)])
    assert generalizability(zero, zero) is None


def test_generalizability_grid_mismatch_rejected():
    b = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    e = _sf((0.1, 0.3), [(0.1, 0.2), (0.2, 0.4)])
    with pytest.raises(ValueError):
        generalizability(b, e)


# -- stability -----------------------------------------------------------


def test_stability_identical_splits_is_zero():
    sf = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    assert stability([sf, sf, sf]) == pytest.approx(0.0, abs=1e-15)


def test_stability_hand_case():
    # Coverage differs by 0.2 at both budgets: population variance 0.01,
    # damped by sqrt(2) contributors.
    a = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    b = _sf((0.1, 0.2), [(0.1, 0.4), (0.2, 0.6)])
    assert stability([a, b]) == pytest.approx(0.01 / math.sqrt(2), abs=1e-12)


def test_stability_split_outside_span_does_not_contribute():
    a = _sf((0.1, 0.2), [(0.1, 0.2), (0.2, 0.4)])
    b = _sf((0.1, 0.2), [None, (0.15, 0.9)])
    # Budget 0.1: only a contributes, variance 0.  Budget 0.2: b's span
    # [0.15, 0.15] misses it, so again only a contributes.
    assert stability([a, b]) == 0.0


def test_stability_interpolates_between_points():
    a = _sf((0.1, 0.2, 0.3), [(0.1, 0.0), (0.15, 0.0), (0.3, 0.0)])
    b = _sf((0.1, 0.2, 0.3), [(0.1, 0.2), (0.15, 0.2), (0.3, 0.8)])
    # At budget 0.2, b interpolates to 0.2 + 0.05/0.15 * 0.6 = 0.4.
    v1 = np.var([0.0, 0.2]) / math.sqrt(2)
    v2 = np.var([0.0, 0.4]) / math.sqrt(2)
    v3 = np.var([0.0, 0.8]) / math.sqrt(2)
    assert stability([a, b]) == pytest.approx((v1 + v2 + v3) / 3, abs=1e-12)


def test_stability_duplicating_one_split_can_raise_it():
    # Four splits with coverage 0,0,0,1 at a single budget score
    # 0.1875 / 2.  Adding a fifth split identical to the outlier raises
    # the value to 0.24 / sqrt(5), because the damping grows slower than
    # the variance concentration.
    lows = [_sf((0.05, 0.15), [(0.05, 0.0), (0.15, 0.0)]) for _ in range(3)]
    high = _sf((0.05, 0.15), [(0.05, 1.0), (0.15, 1.0)])
    base = stability(lows + [high])
    assert base == pytest.approx(0.1875 / 2.0, abs=1e-12)
    bigger = stability(lows + [high, high])
    assert bigger == pytest.approx(0.24 / math.sqrt(5), abs=1e-12)
    assert bigger > base


def test_stability_duplicating_every_split_never_raises_it():
    lows = [_sf((0.05, 0.15), [(0.05, 0.0), (0.15, 0.0)]) for _ in range(3)]
    high = _sf((0.05, 0.15), [(0.05, 1.0), (0.15, 1.0)])
    splits = lows + [high]
    base = stability(splits)
    doubled = stability(splits + splits)
    assert doubled == pytest.approx(base / math.sqrt(2), abs=1e-12)
    assert doubled <= base


def test_stability_undefined_cases_and_grid_check():
    assert stability([]) is None
    off_grid = _sf((0.1,), [(0.5, 0.2)])
    assert stability([off_grid]) is None
    a = _sf((0.1,), [(0.1, 0.2)])
    b = _sf((0.2,), [(0.2, 0.2)])
    with pytest.raises(ValueError):
        stability([a, b])


# -- aggregation ---------------------------------------------------------


def test_mean_over_splits():
    assert mean_over_splits([0.1, None, 0.3]) == (pytest.approx(0.2), 1)
    assert mean_over_splits([None, None]) == (None, 2)
    assert mean_over_splits([]) == (None, 0)
    assert mean_over_splits([0.4]) == (pytest.approx(0.4), 0)


def test_topsis_single_alternative_scores_one():
    assert topsis([[0.3, 0.1, 0.02]]).tolist() == [1.0]


def test_topsis_identical_alternatives_score_half():
    scores = topsis([[0.3, 0.1, 0.02]] * 3)
    assert scores.tolist() == [0.5, 0.5, 0.5]


def test_topsis_dominance():
    scores = topsis([[0.3, 0.05, 0.01], [0.2, 0.10, 0.02]])
    assert scores[0] == pytest.approx(1.0)
    assert scores[1] == pytest.approx(0.0)


def test_topsis_three_way_frozen_oracle():
    # Recomputed by hand with vector normalization, weights (0.6, 0.2, 0.2),
    # first criterion benefit, others cost.
    matrix = [
        [0.30, 0.10, 0.02],
        [0.20, 0.05, 0.01],
        [0.25, 0.20, 0.03],
    ]
    scores = topsis(matrix)
    assert scores[0] == pytest.approx(0.712257777128, abs=1e-9)
    assert scores[1] == pytest.approx(0.552779425128, abs=1e-9)
    assert scores[2] == pytest.approx(0.272727272727, abs=1e-9)


def test_topsis_column_rescale_invariance():
    m1 = [[0.30, 0.10, 0.02], [0.20, 0.05, 0.01], [0.25, 0.20, 0.03]]
    m2 = [[r[0], 7.0 * r[1], r[2]] for r in m1]
    assert np.allclose(topsis(m1), topsis(m2))


def test_topsis_constant_column_is_inert():
    with_const = topsis([[0.3, 0.1, 0.5], [0.2, 0.2, 0.5]])
    without = topsis([[0.3, 0.1], [0.2, 0.2]], weights=(0.6, 0.2), benefit=(True, False))
    assert np.allclose(with_const, without)


def test_topsis_input_validation():
    with pytest.raises(ValueError):
        topsis([0.3, 0.1, 0.02])
    with pytest.raises(ValueError):
        topsis([[0.3, 0.1], [0.2, 0.2]])
    with pytest.raises(ValueError):
        topsis([[0.3, float("nan"), 0.02], [0.2, 0.1, 0.01]])


# -- best achievable curve -----------------------------------------------


def test_best_harmonic_curve_peaks_at_error_rate():
    curve = best_harmonic_curve(0.05, [0.0, 0.02, 0.05, 0.10, 1.0])
    assert curve[0] == 0.0
    assert curve[1] == pytest.approx(4 / 7, abs=1e-12)
    assert curve[2] == 1.0
    assert curve[3] == pytest.approx(2 / 3, abs=1e-12)
    assert curve[4] == pytest.approx(0.1 / 1.05, abs=1e-12)
    assert np.all(curve <= 1.0)


def test_best_harmonic_curve_validation():
    with pytest.raises(ValueError):
        best_harmonic_curve(0.0, [0.1])
    with pytest.raises(ValueError):
        best_harmonic_curve(1.2, [0.1])
    with pytest.raises(ValueError):
        best_harmonic_curve(0.1, [1.5])


def test_stats_of_materialized_random_subset():
    d = table1_dataset()
    rule = fit_random_subset(d, max_budget=0.2, seed=1)
    att = materialize(rule, d, 0.1)
    st = attention_stats(d, att)
    assert st.size == 100
    assert st.frac_size == pytest.approx(0.1)
    assert st.error_count == int((d.z[att.indices] == 0).sum())
