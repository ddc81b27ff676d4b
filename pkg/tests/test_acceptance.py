"""Acceptance suite: one test per shipping criterion.

Each test is self-contained, checks its stated tolerance, and (where the
criterion bounds runtime) asserts the measured wall time.  Run with -v to
get one pass/fail line per criterion.
"""

import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from errloc.dataset import load_csv, make_splits, subset
from errloc.harness import ExperimentConfig, ForestParams, PredictionSource, run_experiment
from errloc.metrics import (
    StepFunction,
    attention_stats,
    auc,
    generalizability,
    stability,
    step_function,
    topsis,
)
from errloc.slicing import Predicate, hypergeom_p, make_slice
from errloc.strategies import (
    SLICE_STRATEGIES,
    STRATEGIES,
    BudgetGrid,
    FitFailure,
    budget_cap,
    fit_random_subset,
    fit_rank_order,
    fit_set_cover,
    fit_strategy,
    materialize,
)
from synthdata import (
    census_like,
    cover_instance,
    random_labeled,
    table1_dataset,
)
from test_metrics import _sf


def test_criterion_1_reference_table_reproduction():
    started = time.perf_counter()
    d = table1_dataset()
    assert d.n_rows == 1000 and d.error_count == 50

    first = attention_stats(d, range(37))
    assert (first.size, first.error_count) == (37, 13)
    assert first.coverage == pytest.approx(0.26, abs=1e-12)
    assert first.error_rate == pytest.approx(0.351, abs=1e-3)
    assert first.harmonic == pytest.approx(0.299, abs=1e-3)

    second = attention_stats(d, range(99))
    assert (second.size, second.error_count) == (99, 21)
    assert second.coverage == pytest.approx(0.42, abs=1e-12)
    assert second.error_rate == pytest.approx(0.212, abs=1e-3)
    assert second.harmonic == pytest.approx(0.282, abs=1e-3)
    assert time.perf_counter() - started < 1.0


def test_criterion_2_hypergeometric_tail_oracle():
    # Exact integer enumeration of the lower tail for every parameter
    # combination with N <= 60, compared at 1e-12.
    started = time.perf_counter()
    top = 60
    comb = [[0] * (top + 1) for _ in range(top + 1)]
    for n in range(top + 1):
        comb[n][0] = 1
        for k in range(1, n + 1):
            comb[n][k] = comb[n - 1][k - 1] + comb[n - 1][k]

    worst = 0.0
    checked = 0
    for big_n in range(1, top + 1):
        for big_k in range(big_n + 1):
            for draw in range(big_n + 1):
                total = comb[big_n][draw]
                cum = 0
                for k in range(min(draw, big_k) + 1):
                    if draw - k <= big_n - big_k:
                        cum += comb[big_k][k] * comb[big_n - big_k][draw - k]
                    expected = cum / total
                    got = hypergeom_p(big_n, big_k, draw, k)
                    worst = max(worst, abs(got - expected))
                    checked += 1
    assert checked > 1_000_000
    assert worst <= 1e-12
    # Queries above the support are outside the function's domain.
    with pytest.raises(ValueError):
        hypergeom_p(10, 4, 6, 5)
    assert time.perf_counter() - started < 30.0


def _greedy_cover_oracle(err_rows, slice_rows, supports, cap):
    """Reimplementation of the documented greedy rule on plain sets."""
    union = set()
    remaining = list(range(len(slice_rows)))
    chosen, cums = [], []
    blocked = False
    while remaining:
        best = None
        best_rank = None
        for i in remaining:
            new = slice_rows[i] - union
            reward = len(new & err_rows)
            if reward == 0:
                continue
            cost = len(new) - reward
            zero = 1 if cost == 0 else 0
            ratio = Fraction(0) if cost == 0 else Fraction(reward, cost)
            rank = (zero, ratio, reward, -supports[i], -i)
            if best_rank is None or rank > best_rank:
                best, best_rank = i, rank
        if best is None:
            break
        if len(union | slice_rows[best]) > cap:
            blocked = True
            break
        union |= slice_rows[best]
        remaining.remove(best)
        chosen.append(best)
        cums.append(len(union))
    if not chosen:
        return None, ("budget" if blocked else "reward")
    return (chosen, cums), None


def test_criterion_3_greedy_cover_matches_bruteforce():
    started = time.perf_counter()
    agreements = 0
    failures = 0
    for seed in range(500):
        build, slices = cover_instance(seed)
        rng = np.random.default_rng(10_000 + seed)
        budget = float(rng.uniform(0.15, 1.0))
        err_rows = {int(i) for i in np.flatnonzero(build.z == 0)}
        slice_rows = [
            {int(i) for i in np.flatnonzero(s.membership(build))} for s in slices
        ]
        supports = [s.support for s in slices]
        cap = budget_cap(budget, build.n_rows)
        expected, failure = _greedy_cover_oracle(err_rows, slice_rows, supports, cap)
        if failure is not None:
            with pytest.raises(FitFailure):
                fit_set_cover(build, slices, max_budget=budget)
            failures += 1
            continue
        rule = fit_set_cover(build, slices, max_budget=budget)
        got = [slices.index(s) for s in rule.slices]
        assert got == expected[0], f"instance {seed}: {got} != {expected[0]}"
        assert list(rule.cum_union_sizes) == expected[1], f"instance {seed}"
        agreements += 1
    assert agreements + failures == 500
    assert agreements >= 250
    assert time.perf_counter() - started < 10.0


def test_criterion_4_monotonicity_suite():
    grid = BudgetGrid.uniform(0.20, 0.01)
    fits = {name: 0 for name in STRATEGIES}
    for seed in range(100):
        d = random_labeled(seed)
        from errloc.slicing import SliceConfig, find_slices, rank_slices

        slices = find_slices(d, SliceConfig())
        for name in STRATEGIES:
            try:
                rule = fit_strategy(name, d, 0.20, slices=slices, seed=seed)
            except FitFailure:
                continue
            fits[name] += 1
            seen_defined = False
            prev = None
            for b in grid.budgets:
                att = materialize(rule, d, b)
                if att is None:
                    assert not seen_defined, f"{name} seed {seed}: gap after defined budget"
                    continue
                seen_defined = True
                st = attention_stats(d, att)
                assert st.frac_size <= b + 1e-9, f"{name} seed {seed}: size over budget"
                if prev is not None:
                    assert st.size >= prev.size, f"{name} seed {seed}: N shrank"
                    assert st.frac_size >= prev.frac_size, f"{name} seed {seed}"
                    assert st.error_count >= prev.error_count, f"{name} seed {seed}: M shrank"
                    assert st.coverage >= prev.coverage, f"{name} seed {seed}: MC shrank"
                prev = st
            assert seen_defined, f"{name} seed {seed}: fitted rule never defined"
    # The suite is vacuous if a strategy never fits.
    for name, count in fits.items():
        assert count >= 20, f"{name} fitted only {count}/100 datasets"


def test_criterion_5_analytic_curve_checks():
    # Full-coverage step function: area reduces to (n_K - n_1) / n_K.
    flat = _sf((0.1, 0.2, 0.3), [(0.08, 1.0), (0.21, 1.0), (0.35, 1.0)])
    assert auc(flat) == pytest.approx((0.35 - 0.08) / 0.35, abs=1e-12)
    scaled = _sf((0.1, 0.2, 0.3), [(0.08, 0.6), (0.21, 0.6), (0.35, 0.6)])
    assert auc(scaled) == pytest.approx(0.6 * (0.35 - 0.08) / 0.35, abs=1e-12)

    together = _sf((0.1, 0.2), [(0.1, 0.3), (0.2, 0.55)])
    assert generalizability(together, together) == 0.0

    assert abs(stability([together] * 5)) <= 1e-12

    d = table1_dataset()
    inner = make_slice(d, [Predicate.interval("x", 0.0, 36.0)], rank=0.9)
    outer = make_slice(d, [Predicate.interval("x", 0.0, 98.0)], rank=0.6)
    rule = fit_rank_order(d, [inner, outer], max_budget=0.20)
    sf = step_function(rule, d, BudgetGrid.uniform(0.20, 0.01))
    assert auc(sf) == pytest.approx(0.1628, abs=1e-3)


def test_criterion_6_random_baseline_calibration():
    d = table1_dataset()
    assert d.mcr == pytest.approx(0.05)
    coverages = []
    for seed in range(200):
        rule = fit_random_subset(d, max_budget=0.20, seed=seed)
        att = materialize(rule, d, 0.10)
        coverages.append(attention_stats(d, att).coverage)
    mean = float(np.mean(coverages))
    se = float(np.std(coverages, ddof=1)) / math.sqrt(len(coverages))
    assert se > 0.0
    assert abs(mean - 0.10) <= 3.0 * se, f"mean {mean:.4f}, se {se:.4f}"


@pytest.fixture(scope="module")
def census_report(tmp_path_factory):
    root = tmp_path_factory.mktemp("census")
    d = census_like()
    from errloc.dataset import write_csv

    path = root / "census.csv"
    write_csv(d, path)
    cfg = ExperimentConfig(
        data=str(path),
        schema={c.name: c.kind for c in d.columns},
        q_count=3,
        max_budget=0.20,
        budget_delta=0.05,
        seed=0,
        predictions=PredictionSource(kind="builtin_forest", forest=ForestParams()),
    )
    started = time.perf_counter()
    report = run_experiment(cfg)
    return report, time.perf_counter() - started


def test_criterion_7_desk_scale_experiment(census_report):
    report, elapsed = census_report
    assert elapsed < 600.0
    assert len(report["splits"]) == 3
    assert report["budgets"] == [0.05, 0.10, 0.15, 0.20]

    for rec in report["splits"]:
        # (a) pooled test misclassification rate of the forest.
        assert 0.12 <= rec["mcr"]["test"] <= 0.18, rec["mcr"]

        # (b) per-split build AUC ordering against the random baseline.
        aucs = {name: rec["strategies"][name]["auc_build"] for name in STRATEGIES}
        assert aucs["set_cover"] is not None and aucs["random_subset"] is not None
        assert aucs["set_cover"] > aucs["random_subset"], aucs
        assert aucs["random_order"] is not None
        assert aucs["random_order"] > aucs["random_subset"], aucs

        # (c) slice-strategy attention sets stay purer than the background.
        build_mcr = rec["mcr"]["build"]
        for name in SLICE_STRATEGIES:
            strat = rec["strategies"][name]
            assert strat["fit_failure"] is None, (name, strat["fit_failure"])
            for st in strat["build"]["stats"]:
                if st is not None:
                    assert st["error_rate"] > build_mcr, (name, st)


def test_criterion_8_deterministic_reports(tmp_path):
    from synthdata import SOURCE_SCHEMA, write_source_csv

    data = tmp_path / "d.csv"
    write_source_csv(data, n=600, seed=6)
    cfg = ExperimentConfig(
        data=str(data),
        schema=SOURCE_SCHEMA,
        q_count=2,
        seed=5,
        predictions=PredictionSource(kind="builtin_forest", forest=ForestParams(n_trees=8)),
    )
    run_experiment(cfg, out_dir=str(tmp_path / "run1"))
    run_experiment(cfg, out_dir=str(tmp_path / "run2"))
    b1 = (tmp_path / "run1" / "report.json").read_bytes()
    b2 = (tmp_path / "run2" / "report.json").read_bytes()
    assert b1 == b2


def test_criterion_9_topsis_checks():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows = int(rng.integers(2, 7))
        scores = topsis(rng.uniform(0.01, 1.0, size=(rows, 3)))
        assert np.all((scores >= 0.0) & (scores <= 1.0))

    two = topsis([[0.3, 0.05, 0.01], [0.2, 0.10, 0.02]])
    assert two[0] == pytest.approx(1.0)
    assert two[1] == pytest.approx(0.0)

    matrix = [
        [0.30, 0.10, 0.02],
        [0.20, 0.05, 0.01],
        [0.25, 0.20, 0.03],
    ]
    scores = topsis(matrix)
    assert scores[0] == pytest.approx(0.712257777128, abs=1e-9)
    assert scores[1] == pytest.approx(0.552779425128, abs=1e-9)
    assert scores[2] == pytest.approx(0.272727272727, abs=1e-9)
