"""Find feature slices where classifier errors concentrate.

For every feature combination up to a configured size, a small CART is
grown on the correctness flag z.  Terminal leaves that are large enough,
inaccurate enough, and statistically significant under a lower-tailed
hypergeometric test become Slices: conjunctions of one predicate per
feature (a closed numeric interval or a category set).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .dataset import CATEGORICAL, NUMERIC, Dataset, DatasetError

_NEG_INF = float("-inf")
_POS_INF = float("inf")


# -- hypergeometric tail -------------------------------------------------

_LOGFACT = [0.0]


def _logfact(n: int) -> float:
    table = _LOGFACT
    while len(table) <= n:
        table.append(math.lgamma(len(table) + 1))
    return table[n]


def hypergeom_p(total: int, correct: int, support: int, observed: int) -> float:
    """Lower tail P(X <= observed) for X ~ Hypergeometric(total, correct, support).

    X counts correct rows in a size-`support` draw from `total` rows of which
    `correct` are correct.  Terms are summed from log-factorials, so the
    result is accurate to well below 1e-12 in absolute terms.
    """
    if not 0 <= correct <= total:
        raise ValueError("need 0 <= correct <= total")
    if not 0 <= support <= total:
        raise ValueError("need 0 <= support <= total")
    if not 0 <= observed <= min(support, correct):
        raise ValueError("need 0 <= observed <= min(support, correct)")
    lf = _logfact
    lf(total)
    table = _LOGFACT
    j_min = max(0, support + correct - total)
    if observed < j_min:
        return 0.0
    log_denom = table[total] - table[support] - table[total - support]
    wrong = total - correct
    terms = []
    for j in range(j_min, observed + 1):
        log_num = (
            table[correct]
            - table[j]
            - table[correct - j]
            + table[wrong]
            - table[support - j]
            - table[wrong - support + j]
        )
        terms.append(math.exp(log_num - log_denom))
    return min(1.0, math.fsum(terms))


# -- predicates and slices -----------------------------------------------


@dataclass(frozen=True)
class Predicate:
    """Single-feature membership test: closed interval or category set.

    Rows with a missing numeric value never match an interval.  Missing
    categorical cells carry the empty-string token and match like any
    other category.
    """

    feature: str
    kind: str
    lo: float = _NEG_INF
    hi: float = _POS_INF
    values: frozenset = frozenset()

    def __post_init__(self):
        if self.kind == NUMERIC:
            if math.isnan(self.lo) or math.isnan(self.hi) or self.lo > self.hi:
                raise ValueError(f"bad interval [{self.lo}, {self.hi}] for {self.feature!r}")
        elif self.kind == CATEGORICAL:
            if not self.values:
                raise ValueError(f"empty category set for {self.feature!r}")
        else:
            raise ValueError(f"unknown predicate kind {self.kind!r}")

    @classmethod
    def interval(cls, feature: str, lo: float, hi: float) -> "Predicate":
        return cls(feature=feature, kind=NUMERIC, lo=float(lo), hi=float(hi))

    @classmethod
    def categories(cls, feature: str, values) -> "Predicate":
        return cls(feature=feature, kind=CATEGORICAL, values=frozenset(str(v) for v in values))

    def mask(self, d: Dataset) -> np.ndarray:
        if d.kind(self.feature) != self.kind:
            raise DatasetError(f"feature {self.feature!r} is not {self.kind} on this dataset")
        arr = d.feature(self.feature)
        if self.kind == NUMERIC:
            return (arr >= self.lo) & (arr <= self.hi)
        member = self.values.__contains__
        return np.frompyfunc(member, 1, 1)(arr).astype(bool)

    def describe(self) -> str:
        if self.kind == CATEGORICAL:
            vals = sorted(self.values)
            if len(vals) == 1:
                return f"({self.feature} = {vals[0]})"
            return f"({self.feature} ∈ {{{', '.join(vals)}}})"
        lo, hi = self.lo, self.hi
        if lo == _NEG_INF and hi == _POS_INF:
            return f"({self.feature}: any)"
        if lo == _NEG_INF:
            return f"({self.feature} ≤ {_fmt(hi)})"
        if hi == _POS_INF:
            return f"({self.feature} ≥ {_fmt(lo)})"
        return f"({_fmt(lo)} ≤ {self.feature} ≤ {_fmt(hi)})"

    def to_dict(self) -> dict:
        if self.kind == NUMERIC:
            return {
                "feature": self.feature,
                "kind": self.kind,
                "lo": None if self.lo == _NEG_INF else self.lo,
                "hi": None if self.hi == _POS_INF else self.hi,
            }
        return {"feature": self.feature, "kind": self.kind, "values": sorted(self.values)}

    @classmethod
    def from_dict(cls, obj: dict) -> "Predicate":
        if obj["kind"] == NUMERIC:
            lo = _NEG_INF if obj.get("lo") is None else float(obj["lo"])
            hi = _POS_INF if obj.get("hi") is None else float(obj["hi"])
            return cls.interval(obj["feature"], lo, hi)
        return cls.categories(obj["feature"], obj["values"])

    def sort_key(self):
        if self.kind == NUMERIC:
            return (self.feature, self.kind, self.lo, self.hi, ())
        return (self.feature, self.kind, 0.0, 0.0, tuple(sorted(self.values)))


def _fmt(v: float) -> str:
    return f"{v:g}"


@dataclass(frozen=True)
class Slice:
    """Conjunction of per-feature predicates with counts measured on build."""

    predicates: tuple
    support: int
    errors: int
    p_value: float
    rank: float | None = None

    def __post_init__(self):
        feats = [p.feature for p in self.predicates]
        if not feats:
            raise ValueError("a slice needs at least one predicate")
        if len(set(feats)) != len(feats):
            raise ValueError("at most one predicate per feature")
        if not 0 <= self.errors <= self.support:
            raise ValueError("bad support/error counts")

    @property
    def accuracy(self) -> float:
        return 1.0 - self.errors / self.support

    @property
    def error_rate(self) -> float:
        return self.errors / self.support

    def membership(self, d: Dataset) -> np.ndarray:
        out = self.predicates[0].mask(d)
        for pred in self.predicates[1:]:
            out = out & pred.mask(d)
        return out

    def describe(self) -> str:
        return " & ".join(p.describe() for p in self.predicates)

    def key(self):
        return tuple(sorted(p.sort_key() for p in self.predicates))

    def to_dict(self) -> dict:
        return {
            "predicates": [p.to_dict() for p in self.predicates],
            "support": self.support,
            "errors": self.errors,
            "p_value": self.p_value,
            "rank": self.rank,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Slice":
        return cls(
            predicates=tuple(Predicate.from_dict(p) for p in obj["predicates"]),
            support=int(obj["support"]),
            errors=int(obj["errors"]),
            p_value=float(obj["p_value"]),
            rank=None if obj.get("rank") is None else float(obj["rank"]),
        )


def make_slice(build: Dataset, predicates, rank: float | None = None) -> Slice:
    """Measure a predicate conjunction on build and package it as a Slice."""
    build._require_z()
    probe = Slice(predicates=tuple(predicates), support=1, errors=0, p_value=1.0)
    mask = probe.membership(build)
    support = int(mask.sum())
    if support == 0:
        raise DatasetError("predicates match no build rows")
    errors = support - int(build.z[mask].sum())
    p_val = hypergeom_p(build.n_rows, build.correct_count, support, support - errors)
    return Slice(tuple(predicates), support, errors, p_val, rank)


# -- decision tree -------------------------------------------------------


@dataclass
class TreeNode:
    """Node of the per-combination CART grown on z.

    Internal numeric nodes send x <= threshold left; categorical nodes send
    x == category left.  Rows with a missing numeric value follow
    missing_left, the side holding the majority of the node's non-missing
    rows.
    """

    size: int
    errors: int
    depth: int
    feature: str | None = None
    kind: str | None = None
    threshold: float | None = None
    category: str | None = None
    missing_left: bool = True
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _gini(err, tot):
    p = err / tot
    return 2.0 * p * (1.0 - p)


_MIN_GAIN = 1e-12


def _best_split(d: Dataset, features, idx: np.ndarray, err: np.ndarray, min_leaf: int):
    """Return (gain, feature, kind, threshold_or_category) or None.

    Gain ties keep the earlier feature; within a numeric feature the smaller
    threshold wins, within a categorical feature the lexicographically
    smaller category.  Numeric gains are computed on non-missing rows and
    scaled by the non-missing fraction of the node.
    """
    n_node = idx.size
    best = None
    for feature in features:
        kind = d.kind(feature)
        x = d.feature(feature)[idx]
        e = err
        if kind == NUMERIC:
            nm = ~np.isnan(x)
            xs = x[nm]
            if xs.size < 2 * min_leaf:
                continue
            order = np.argsort(xs, kind="stable")
            xs = xs[order]
            es = e[nm][order]
            n_nm = xs.size
            cum = np.cumsum(es)
            total = cum[-1]
            cuts = np.nonzero(xs[:-1] < xs[1:])[0]
            if cuts.size == 0:
                continue
            nl = cuts + 1
            ok = (nl >= min_leaf) & (n_nm - nl >= min_leaf)
            cuts, nl = cuts[ok], nl[ok]
            if cuts.size == 0:
                continue
            el = cum[cuts]
            nr = n_nm - nl
            er = total - el
            pl, pr = el / nl, er / nr
            child = (nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)) / n_nm
            gains = (_gini(total, n_nm) - child) * (n_nm / n_node)
            pos = int(np.argmax(gains))
            gain = float(gains[pos])
            split = float((xs[cuts[pos]] + xs[cuts[pos] + 1]) / 2.0)
            cand = (gain, feature, kind, split)
        else:
            cats, inv = np.unique(x, return_inverse=True)
            if cats.size < 2:
                continue
            cnt = np.bincount(inv, minlength=cats.size)
            ecnt = np.bincount(inv, weights=e.astype(np.float64), minlength=cats.size)
            ok = (cnt >= min_leaf) & (n_node - cnt >= min_leaf)
            if not ok.any():
                continue
            total = e.sum()
            nl, el = cnt[ok], ecnt[ok]
            nr, er = n_node - nl, total - el
            pl, pr = el / nl, er / nr
            child = (nl * 2 * pl * (1 - pl) + nr * 2 * pr * (1 - pr)) / n_node
            gains = _gini(total, n_node) - child
            pos = int(np.argmax(gains))
            gain = float(gains[pos])
            cand = (gain, feature, kind, str(cats[ok][pos]))
        if gain <= _MIN_GAIN:
            continue
        if best is None or gain > best[0]:
            best = cand
    return best


def grow_tree(build: Dataset, features, max_depth: int = 4, min_leaf: int = 1) -> TreeNode:
    """Grow a CART on z over the named features of build.

    Features are considered in dataset column order regardless of the order
    given, which fixes the split tie-break.  Growth stops at max_depth, at
    pure nodes, or when no split leaves min_leaf non-missing rows per side.
    """
    z = build._require_z()
    names = list(build.feature_names)
    requested = list(features)
    if not requested:
        raise DatasetError("grow_tree needs at least one feature")
    if len(set(requested)) != len(requested):
        raise DatasetError("duplicate features")
    unknown = [f for f in requested if f not in names]
    if unknown:
        raise DatasetError(f"unknown features: {unknown}")
    feats = sorted(requested, key=names.index)
    err_all = (z == 0)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        err = err_all[idx]
        n_err = int(err.sum())
        node = TreeNode(size=idx.size, errors=n_err, depth=depth)
        if depth >= max_depth or n_err in (0, idx.size) or idx.size < 2 * min_leaf:
            return node
        found = _best_split(build, feats, idx, err, min_leaf)
        if found is None:
            return node
        _, feature, kind, split = found
        x = build.feature(feature)[idx]
        if kind == NUMERIC:
            nm = ~np.isnan(x)
            go_left = nm & (x <= split)
            go_right = nm & ~go_left
            left_idx = idx[go_left]
            right_idx = idx[go_right]
            missing_left = left_idx.size >= right_idx.size
            miss_idx = idx[~nm]
            if miss_idx.size:
                if missing_left:
                    left_idx = np.sort(np.concatenate([left_idx, miss_idx]))
                else:
                    right_idx = np.sort(np.concatenate([right_idx, miss_idx]))
            node.threshold = split
            node.missing_left = missing_left
        else:
            go_left = np.array([t == split for t in x], dtype=bool)
            left_idx = idx[go_left]
            right_idx = idx[~go_left]
            node.category = split
        node.feature = feature
        node.kind = kind
        node.left = grow(left_idx, depth + 1)
        node.right = grow(right_idx, depth + 1)
        return node

    return grow(np.arange(build.n_rows, dtype=np.int64), 0)


def _leaf_paths(node: TreeNode, conditions: list, out: list) -> None:
    if node.is_leaf:
        out.append(list(conditions))
        return
    if node.kind == NUMERIC:
        left_cond = (node.feature, NUMERIC, "<=", node.threshold)
        right_cond = (node.feature, NUMERIC, ">", node.threshold)
    else:
        left_cond = (node.feature, CATEGORICAL, "==", node.category)
        right_cond = (node.feature, CATEGORICAL, "!=", node.category)
    conditions.append(left_cond)
    _leaf_paths(node.left, conditions, out)
    conditions[-1] = right_cond
    _leaf_paths(node.right, conditions, out)
    conditions.pop()


def _collapse_path(conditions, observed: dict):
    """Collapse a root-to-leaf path into one predicate per feature.

    Numeric half-open constraints snap to the closed hull of the observed
    build values they admit; categorical negations subtract from the
    observed category set.  Returns None for paths no observed value can
    satisfy (leaves populated only by routed missing rows).
    """
    by_feature: dict = {}
    order = []
    for feature, kind, op, value in conditions:
        if feature not in by_feature:
            order.append(feature)
            by_feature[feature] = {"kind": kind, "lo": _NEG_INF, "hi": _POS_INF, "pos": None, "neg": set()}
        slot = by_feature[feature]
        if kind == NUMERIC:
            if op == "<=":
                slot["hi"] = min(slot["hi"], value)
            else:
                slot["lo"] = max(slot["lo"], value)
        elif op == "==":
            slot["pos"] = value
        else:
            slot["neg"].add(value)
    predicates = []
    for feature in order:
        slot = by_feature[feature]
        vals = observed[feature]
        if slot["kind"] == NUMERIC:
            lo_excl, hi_incl = slot["lo"], slot["hi"]
            inside = vals[(vals > lo_excl) & (vals <= hi_incl)]
            if inside.size == 0:
                return None
            lo = _NEG_INF if lo_excl == _NEG_INF else float(inside[0])
            hi = _POS_INF if hi_incl == _POS_INF else float(inside[-1])
            predicates.append(Predicate.interval(feature, lo, hi))
        else:
            if slot["pos"] is not None:
                values = {slot["pos"]} - slot["neg"]
            else:
                values = set(vals) - slot["neg"]
            if not values:
                return None
            predicates.append(Predicate.categories(feature, values))
    return tuple(predicates)


# -- slice configuration and discovery -----------------------------------


@dataclass(frozen=True)
class SliceConfig:
    """Knobs for slice discovery; None fields resolve from the build split."""

    max_combo: int = 2
    min_support: int | None = None
    accuracy_threshold: float | None = None
    alpha: float = 0.01
    max_depth: int = 4
    min_leaf: int | None = None

    def __post_init__(self):
        if not 1 <= self.max_combo <= 3:
            raise ValueError("max_combo must be 1, 2, or 3")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if self.min_support is not None and self.min_support < 1:
            raise ValueError("min_support must be positive")

    def resolve(self, build: Dataset) -> "SliceConfig":
        """Fill defaulted fields from build: support floor and accuracy bar."""
        build._require_z()
        n = build.n_rows
        min_support = self.min_support
        if min_support is None:
            min_support = max(20, math.ceil(0.005 * n))
        threshold = self.accuracy_threshold
        if threshold is None:
            acc = 1.0 - build.mcr
            se = math.sqrt(acc * (1.0 - acc) / n)
            threshold = acc - 2.0 * se
        min_leaf = self.min_leaf if self.min_leaf is not None else min_support
        return replace(
            self,
            min_support=min_support,
            accuracy_threshold=threshold,
            min_leaf=min_leaf,
        )


def find_slices(build: Dataset, cfg: SliceConfig = SliceConfig()) -> list:
    """Discover significant error slices on the build split.

    Every unordered feature combination of size 1..max_combo gets its own
    tree; qualifying leaves are collapsed to predicates, re-measured on the
    full build, filtered on support, accuracy, and the hypergeometric
    p-value, then deduplicated and ranked.  Output order is (combination
    order, leaf order), which makes repeated runs identical.
    """
    build._require_z()
    if not build.columns:
        raise DatasetError("find_slices needs at least one feature column")
    cfg = cfg.resolve(build)
    if build.n_rows < cfg.min_support:
        raise DatasetError("build split smaller than min_support")

    observed = {}
    for col in build.columns:
        arr = build.feature(col.name)
        if col.kind == NUMERIC:
            observed[col.name] = np.unique(arr[~np.isnan(arr)])
        else:
            observed[col.name] = np.unique(arr)

    n = build.n_rows
    correct = build.correct_count
    z = build.z
    names = build.feature_names
    found = []
    seen = set()
    for size in range(1, min(cfg.max_combo, len(names)) + 1):
        for combo in itertools.combinations(range(len(names)), size):
            feats = [names[i] for i in combo]
            root = grow_tree(build, feats, max_depth=cfg.max_depth, min_leaf=cfg.min_leaf)
            paths: list = []
            _leaf_paths(root, [], paths)
            for conditions in paths:
                if not conditions:
                    continue
                predicates = _collapse_path(conditions, observed)
                if predicates is None:
                    continue
                probe = Slice(predicates, support=1, errors=0, p_value=1.0)
                mask = probe.membership(build)
                support = int(mask.sum())
                if support < cfg.min_support:
                    continue
                errors = support - int(z[mask].sum())
                if 1.0 - errors / support > cfg.accuracy_threshold:
                    continue
                p_val = hypergeom_p(n, correct, support, support - errors)
                if not p_val < cfg.alpha:
                    continue
                key = probe.key()
                if key in seen:
                    continue
                seen.add(key)
                found.append(Slice(predicates, support, errors, p_val))
    return rank_slices(found)


# -- ranking -------------------------------------------------------------


def _monotone_fit(x: np.ndarray, y: np.ndarray):
    """Least-squares error-rate-vs-log-support fit, constrained nonincreasing.

    Degrades quadratic -> linear -> constant until the fitted curve is
    nonincreasing over the observed range, so the derived rank never rewards
    smaller support at a fixed error rate.
    """
    lo, hi = float(x.min()), float(x.max())
    distinct = np.unique(x).size
    if distinct >= 3:
        design = np.stack([x * x, x, np.ones_like(x)], axis=1)
        c2, c1, c0 = np.linalg.lstsq(design, y, rcond=None)[0]
        if max(2 * c2 * lo + c1, 2 * c2 * hi + c1) <= 1e-12:
            return float(c2), float(c1), float(c0)
    if distinct >= 2:
        design = np.stack([x, np.ones_like(x)], axis=1)
        c1, c0 = np.linalg.lstsq(design, y, rcond=None)[0]
        if c1 <= 1e-12:
            return 0.0, float(c1), float(c0)
    return 0.0, 0.0, float(y.mean())


def rank_slices(slices) -> list:
    """Attach a [0, 1] rank to every slice: excess error rate over the trend.

    The trend is a least-squares fit of error rate against log support; the
    signed residual above it is min-max normalized.  The slice-to-rank
    mapping does not depend on the input order, and degenerate spreads map
    to 0.5.
    """
    if not slices:
        return []
    order = sorted(range(len(slices)), key=lambda i: (slices[i].key(), slices[i].support, slices[i].errors))
    x = np.array([math.log(slices[i].support) for i in order])
    y = np.array([slices[i].error_rate for i in order])
    c2, c1, c0 = _monotone_fit(x, y)
    resid = y - (c2 * x * x + c1 * x + c0)
    span = float(resid.max() - resid.min())
    if span < 1e-12:
        ranks = np.full(len(slices), 0.5)
    else:
        ranks = (resid - resid.min()) / span
    by_index = {order[pos]: float(ranks[pos]) for pos in range(len(order))}
    return [replace(s, rank=by_index[i]) for i, s in enumerate(slices)]
