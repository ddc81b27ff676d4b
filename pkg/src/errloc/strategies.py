"""Build budget-constrained attention rules and materialize attention sets.

A rule is fitted on the build split at a maximum budget B and can be
materialized on any schema-compatible target at budgets b <= B.  Slice
strategies keep an ordered slice list whose budget-b prefix is the largest
one whose build union stays within b * N(build); label and confidence rules
re-derive their cutoff per budget from the fitted ordering, and the random
subset rule takes a prefix of one seeded permutation so sets are nested
across budgets.  A rule can be undefined at small budgets, which is a
distinct outcome from matching zero target rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, DatasetError
from .slicing import Slice

SET_COVER = "set_cover"
RANK_ORDER = "rank_order"
RANDOM_ORDER = "random_order"
WORST_LABEL = "worst_label"
CONFIDENCE = "confidence"
RANDOM_SUBSET = "random_subset"

STRATEGIES = (SET_COVER, RANK_ORDER, RANDOM_ORDER, WORST_LABEL, CONFIDENCE, RANDOM_SUBSET)
SLICE_STRATEGIES = (SET_COVER, RANK_ORDER, RANDOM_ORDER)

_EPS = 1e-12


class FitFailure(Exception):
    """A strategy could not produce a defined rule at its maximum budget."""

    def __init__(self, strategy: str, reason: str):
        super().__init__(f"{strategy}: {reason}")
        self.strategy = strategy
        self.reason = reason


def budget_cap(budget: float, n_rows: int) -> int:
    """Largest attention-set size allowed at this budget.

    The 1e-9 slack absorbs binary representation error in decimal budgets
    (0.15 * 1000 must cap at 150, not 149).
    """
    return int(math.floor(budget * n_rows + 1e-9))


@dataclass(frozen=True)
class BudgetGrid:
    """Increasing budgets ending at the fit budget B."""

    budgets: tuple

    def __post_init__(self):
        bs = self.budgets
        if not bs:
            raise ValueError("empty budget grid")
        if any(not 0.0 < b <= 1.0 for b in bs):
            raise ValueError("budgets must lie in (0, 1]")
        if any(b2 <= b1 for b1, b2 in zip(bs, bs[1:])):
            raise ValueError("budgets must be strictly increasing")

    @classmethod
    def uniform(cls, max_budget: float = 0.20, delta: float = 0.01) -> "BudgetGrid":
        if not 0.0 < delta <= max_budget:
            raise ValueError("need 0 < delta <= max_budget")
        k = round(max_budget / delta)
        if abs(k * delta - max_budget) > 1e-9:
            raise ValueError("delta must divide max_budget")
        budgets = [round(i * delta, 12) for i in range(1, k)]
        budgets.append(float(max_budget))
        return cls(tuple(budgets))

    @property
    def max_budget(self) -> float:
        return self.budgets[-1]


@dataclass(frozen=True, eq=False)
class AttentionSet:
    """Row indices selected on a target dataset, with provenance."""

    indices: np.ndarray
    budget: float
    strategy: str
    rule: "AttentionRule | None" = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass
class AttentionRule:
    strategy: str
    max_budget: float
    build_size: int
    fitted_on: dict

    def defined_at(self, budget: float) -> bool:
        raise NotImplementedError

    def select(self, target: Dataset, budget: float) -> np.ndarray:
        raise NotImplementedError

    def body_dict(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        out = {
            "strategy": self.strategy,
            "max_budget": self.max_budget,
            "build_size": self.build_size,
            "fitted_on": self.fitted_on,
        }
        out.update(self.body_dict())
        return out


def materialize(rule: AttentionRule, target: Dataset, budget: float) -> AttentionSet | None:
    """Select the rule's attention set on target at the given budget.

    Returns None when the rule is undefined at this budget.  Budgets above
    the rule's fit budget are rejected.  The budget constrains the build
    prefix, so the materialized fraction of a different target may exceed it.
    """
    if not 0.0 < budget <= rule.max_budget + _EPS:
        raise ValueError(f"budget {budget} outside (0, {rule.max_budget}]")
    if not rule.defined_at(budget):
        return None
    idx = np.sort(np.asarray(rule.select(target, budget), dtype=np.int64))
    idx.setflags(write=False)
    return AttentionSet(indices=idx, budget=budget, strategy=rule.strategy, rule=rule)


# -- slice-union rules ---------------------------------------------------


@dataclass
class SliceUnionRule(AttentionRule):
    """Ordered slices; the budget-b prefix is fixed by build union sizes."""

    slices: tuple = ()
    cum_union_sizes: tuple = ()

    def prefix_len(self, budget: float) -> int:
        cap = budget_cap(budget, self.build_size)
        length = 0
        for size in self.cum_union_sizes:
            if size > cap:
                break
            length += 1
        return length

    def defined_at(self, budget: float) -> bool:
        return self.prefix_len(budget) >= 1

    def select(self, target: Dataset, budget: float) -> np.ndarray:
        length = self.prefix_len(budget)
        mask = self.slices[0].membership(target)
        for s in self.slices[1:length]:
            mask = mask | s.membership(target)
        return np.nonzero(mask)[0]

    def member_slices(self, target: Dataset, budget: float) -> dict:
        """Map selected row index -> ordinal positions of covering prefix slices."""
        length = self.prefix_len(budget)
        cover: dict = {}
        for pos in range(length):
            for i in np.nonzero(self.slices[pos].membership(target))[0]:
                cover.setdefault(int(i), []).append(pos)
        return cover

    def body_dict(self) -> dict:
        return {
            "slices": [s.to_dict() for s in self.slices],
            "cum_union_sizes": list(self.cum_union_sizes),
        }


def _fitted_on(build: Dataset) -> dict:
    return {"rows": build.n_rows, "digest": build.digest()}


def _check_fit_inputs(build: Dataset, max_budget: float) -> None:
    build._require_z()
    if not 0.0 < max_budget <= 1.0:
        raise ValueError("max_budget must lie in (0, 1]")


def fit_set_cover(build: Dataset, slices, max_budget: float = 0.20) -> SliceUnionRule:
    """Greedy weighted cover of build errors by slices.

    Each step adds the slice with the best ratio of newly covered errors to
    newly covered non-errors.  Zero-cost slices outrank all others; ties go
    to the larger reward, then the smaller slice support, then the earlier
    slice in the input list.  The walk stops when the chosen slice would
    push the union above the budget or no slice adds an uncovered error.
    """
    _check_fit_inputs(build, max_budget)
    slices = list(slices)
    if not slices:
        raise FitFailure(SET_COVER, "no slices were found on the build partition")
    masks = [s.membership(build) for s in slices]
    err = build.z == 0
    cap = budget_cap(max_budget, build.n_rows)
    union = np.zeros(build.n_rows, dtype=bool)
    available = list(range(len(slices)))
    chosen: list = []
    cum_sizes: list = []
    first_blocked = None
    while available:
        best_i = None
        best_key = None
        best_added = 0
        for i in available:
            add = masks[i] & ~union
            reward = int((add & err).sum())
            if reward == 0:
                continue
            cost = int(add.sum()) - reward
            ratio = math.inf if cost == 0 else reward / cost
            key = (cost == 0, ratio, reward, -slices[i].support, -i)
            if best_key is None or key > best_key:
                best_i, best_key, best_added = i, key, reward + cost
        if best_i is None:
            break
        new_size = int(union.sum()) + best_added
        if new_size > cap:
            first_blocked = best_i
            break
        union |= masks[best_i]
        available.remove(best_i)
        chosen.append(best_i)
        cum_sizes.append(new_size)
    if not chosen:
        if first_blocked is not None:
            raise FitFailure(SET_COVER, "no slice fits within the budget")
        raise FitFailure(SET_COVER, "no slice adds an uncovered error")
    return SliceUnionRule(
        strategy=SET_COVER,
        max_budget=max_budget,
        build_size=build.n_rows,
        fitted_on=_fitted_on(build),
        slices=tuple(slices[i] for i in chosen),
        cum_union_sizes=tuple(cum_sizes),
    )


def _prefix_rule(strategy: str, build: Dataset, slices, order, max_budget: float) -> SliceUnionRule:
    cap = budget_cap(max_budget, build.n_rows)
    union = np.zeros(build.n_rows, dtype=bool)
    kept: list = []
    cum_sizes: list = []
    for i in order:
        trial = union | slices[i].membership(build)
        size = int(trial.sum())
        if size > cap:
            break
        union = trial
        kept.append(i)
        cum_sizes.append(size)
    if not kept:
        raise FitFailure(strategy, "no slice fits within the budget")
    return SliceUnionRule(
        strategy=strategy,
        max_budget=max_budget,
        build_size=build.n_rows,
        fitted_on=_fitted_on(build),
        slices=tuple(slices[i] for i in kept),
        cum_union_sizes=tuple(cum_sizes),
    )


def fit_rank_order(build: Dataset, slices, max_budget: float = 0.20) -> SliceUnionRule:
    """Order slices by descending rank (ties: smaller p-value, input order)."""
    _check_fit_inputs(build, max_budget)
    slices = list(slices)
    if not slices:
        raise FitFailure(RANK_ORDER, "no slices were found on the build partition")
    if any(s.rank is None for s in slices):
        raise ValueError("slices must carry ranks; run them through rank_slices")
    order = sorted(range(len(slices)), key=lambda i: (-slices[i].rank, slices[i].p_value, i))
    return _prefix_rule(RANK_ORDER, build, slices, order, max_budget)


def fit_random_order(build: Dataset, slices, max_budget: float = 0.20, seed: int = 0) -> SliceUnionRule:
    """Order slices by a seeded permutation; baseline for the slice orderings."""
    _check_fit_inputs(build, max_budget)
    slices = list(slices)
    if not slices:
        raise FitFailure(RANDOM_ORDER, "no slices were found on the build partition")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [int(i) for i in rng.permutation(len(slices))]
    return _prefix_rule(RANDOM_ORDER, build, slices, order, max_budget)


# -- label, confidence, and random baselines -----------------------------


@dataclass
class WorstLabelRule(AttentionRule):
    """Labels ordered by descending build error rate (ties lexicographic)."""

    labels: tuple = ()
    counts: tuple = ()
    error_rates: tuple = ()

    def top_t(self, budget: float) -> int:
        cap = budget_cap(budget, self.build_size)
        total = 0
        t = 0
        for count in self.counts:
            if total + count > cap:
                break
            total += count
            t += 1
        return t

    def defined_at(self, budget: float) -> bool:
        return self.top_t(budget) >= 1

    def select(self, target: Dataset, budget: float) -> np.ndarray:
        if target.y is None:
            raise DatasetError("worst_label needs labels on the target")
        wanted = set(self.labels[: self.top_t(budget)])
        mask = np.array([lab.strip() in wanted for lab in target.y], dtype=bool)
        return np.nonzero(mask)[0]

    def body_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "counts": list(self.counts),
            "error_rates": list(self.error_rates),
        }


def fit_worst_label(build: Dataset, max_budget: float = 0.20) -> WorstLabelRule:
    """Rank labels by build error rate and keep as many as the budget allows."""
    _check_fit_inputs(build, max_budget)
    if build.y is None:
        raise DatasetError("fit_worst_label needs labels")
    counts: dict = {}
    errors: dict = {}
    for label, zi in zip(build.y, build.z):
        key = label.strip()
        counts[key] = counts.get(key, 0) + 1
        if zi == 0:
            errors[key] = errors.get(key, 0) + 1
    order = sorted(counts, key=lambda lab: (-(errors.get(lab, 0) / counts[lab]), lab))
    rule = WorstLabelRule(
        strategy=WORST_LABEL,
        max_budget=max_budget,
        build_size=build.n_rows,
        fitted_on=_fitted_on(build),
        labels=tuple(order),
        counts=tuple(counts[lab] for lab in order),
        error_rates=tuple(errors.get(lab, 0) / counts[lab] for lab in order),
    )
    if rule.top_t(max_budget) == 0:
        raise FitFailure(WORST_LABEL, "the worst label alone exceeds the budget")
    return rule


@dataclass
class ConfidenceRule(AttentionRule):
    """Low-confidence selection; the cutoff re-derives per budget from build."""

    values: tuple = ()
    cum_counts: tuple = ()

    def threshold(self, budget: float) -> float | None:
        cap = budget_cap(budget, self.build_size)
        best = None
        for value, count in zip(self.values, self.cum_counts):
            if count > cap:
                break
            best = value
        return best

    def defined_at(self, budget: float) -> bool:
        return self.threshold(budget) is not None

    def select(self, target: Dataset, budget: float) -> np.ndarray:
        if target.confidence is None:
            raise DatasetError("confidence strategy needs a confidence column on the target")
        cut = self.threshold(budget)
        mask = target.confidence <= cut
        return np.nonzero(mask)[0]

    def body_dict(self) -> dict:
        return {"values": list(self.values), "cum_counts": list(self.cum_counts)}


def fit_confidence(build: Dataset, max_budget: float = 0.20) -> ConfidenceRule:
    """Keep the largest confidence cutoff whose build mass stays within budget."""
    _check_fit_inputs(build, max_budget)
    if build.confidence is None:
        raise DatasetError("fit_confidence needs a confidence column")
    conf = build.confidence[~np.isnan(build.confidence)]
    if conf.size == 0:
        raise DatasetError("fit_confidence needs at least one confidence value")
    values = np.unique(conf)
    cum = np.searchsorted(np.sort(conf), values, side="right")
    rule = ConfidenceRule(
        strategy=CONFIDENCE,
        max_budget=max_budget,
        build_size=build.n_rows,
        fitted_on=_fitted_on(build),
        values=tuple(float(v) for v in values),
        cum_counts=tuple(int(c) for c in cum),
    )
    if rule.threshold(max_budget) is None:
        raise FitFailure(CONFIDENCE, "the lowest-confidence tie exceeds the budget")
    return rule


@dataclass
class RandomSubsetRule(AttentionRule):
    """floor(b * N(target)) rows drawn as a prefix of one seeded permutation."""

    seed: int = 0

    def defined_at(self, budget: float) -> bool:
        return budget_cap(budget, self.build_size) >= 1

    def select(self, target: Dataset, budget: float) -> np.ndarray:
        count = budget_cap(budget, target.n_rows)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        perm = rng.permutation(target.n_rows)
        return np.sort(perm[:count])

    def body_dict(self) -> dict:
        return {"seed": int(self.seed)}


def fit_random_subset(build: Dataset, max_budget: float = 0.20, seed: int = 0) -> RandomSubsetRule:
    _check_fit_inputs(build, max_budget)
    rule = RandomSubsetRule(
        strategy=RANDOM_SUBSET,
        max_budget=max_budget,
        build_size=build.n_rows,
        fitted_on=_fitted_on(build),
        seed=int(seed),
    )
    if not rule.defined_at(max_budget):
        raise FitFailure(RANDOM_SUBSET, "budget admits no rows on this build")
    return rule


# -- dispatch and serialization ------------------------------------------


def fit_strategy(name: str, build: Dataset, max_budget: float = 0.20, slices=None, seed: int = 0) -> AttentionRule:
    if name == SET_COVER:
        return fit_set_cover(build, _need_slices(name, slices), max_budget)
    if name == RANK_ORDER:
        return fit_rank_order(build, _need_slices(name, slices), max_budget)
    if name == RANDOM_ORDER:
        return fit_random_order(build, _need_slices(name, slices), max_budget, seed)
    if name == WORST_LABEL:
        return fit_worst_label(build, max_budget)
    if name == CONFIDENCE:
        return fit_confidence(build, max_budget)
    if name == RANDOM_SUBSET:
        return fit_random_subset(build, max_budget, seed)
    raise ValueError(f"unknown strategy {name!r}")


def _need_slices(name: str, slices):
    if slices is None:
        raise ValueError(f"{name} needs a slice list")
    return slices


def rule_from_dict(obj: dict) -> AttentionRule:
    common = {
        "strategy": obj["strategy"],
        "max_budget": float(obj["max_budget"]),
        "build_size": int(obj["build_size"]),
        "fitted_on": dict(obj["fitted_on"]),
    }
    name = obj["strategy"]
    if name in SLICE_STRATEGIES:
        return SliceUnionRule(
            slices=tuple(Slice.from_dict(s) for s in obj["slices"]),
            cum_union_sizes=tuple(int(v) for v in obj["cum_union_sizes"]),
            **common,
        )
    if name == WORST_LABEL:
        return WorstLabelRule(
            labels=tuple(obj["labels"]),
            counts=tuple(int(v) for v in obj["counts"]),
            error_rates=tuple(float(v) for v in obj["error_rates"]),
            **common,
        )
    if name == CONFIDENCE:
        return ConfidenceRule(
            values=tuple(float(v) for v in obj["values"]),
            cum_counts=tuple(int(v) for v in obj["cum_counts"]),
            **common,
        )
    if name == RANDOM_SUBSET:
        return RandomSubsetRule(seed=int(obj["seed"]), **common)
    raise ValueError(f"unknown strategy {name!r} in rule")
