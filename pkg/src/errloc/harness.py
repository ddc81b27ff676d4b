"""End-to-end experiment harness.

Splits a labeled dataset into seeded train/build/eval partitions, obtains
per-split predictions from the built-in random forest or from external
prediction files, discovers slices on build, fits every configured
strategy, scores step functions on build and eval, and aggregates
AUC / generalizability / stability into TOPSIS rankings.  Slices and rules
are fitted on build only; eval enters scoring exclusively.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .dataset import (
    NUMERIC,
    Dataset,
    DatasetError,
    derive_z,
    load_csv,
    make_splits,
    subset,
)
from .metrics import (
    auc,
    generalizability,
    mean_over_splits,
    stability,
    step_function,
    topsis,
)
from .slicing import SliceConfig, find_slices
from .strategies import STRATEGIES, BudgetGrid, FitFailure, fit_strategy, materialize
from .util import atomic_write_json, atomic_write_text, derive_seed


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# -- built-in classifier -------------------------------------------------


@dataclass(frozen=True)
class ForestParams:
    """Random-forest knobs; the defaults match the usual 100-tree setup."""

    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 5
    features_per_split: int | str = "sqrt"
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
            "seed": self.seed,
        }


class _Encoder:
    """Numeric passthrough with train-median imputation; ordinal categoricals.

    Categories unseen during training encode as -1.
    """

    def fit(self, train: Dataset) -> "_Encoder":
        self.columns = train.columns
        self.medians = {}
        self.codes = {}
        for col in train.columns:
            arr = train.feature(col.name)
            if col.kind == NUMERIC:
                finite = arr[~np.isnan(arr)]
                self.medians[col.name] = float(np.median(finite)) if finite.size else 0.0
            else:
                self.codes[col.name] = {tok: i for i, tok in enumerate(sorted(set(arr)))}
        return self

    def transform(self, d: Dataset) -> np.ndarray:
        out = np.empty((d.n_rows, len(self.columns)), dtype=np.float64)
        for j, col in enumerate(self.columns):
            arr = d.feature(col.name)
            if col.kind == NUMERIC:
                vals = arr.copy()
                vals[np.isnan(vals)] = self.medians[col.name]
                out[:, j] = vals
            else:
                codes = self.codes[col.name]
                out[:, j] = [codes.get(tok, -1) for tok in arr]
        return out


class Forest:
    """Bagged tree ensemble with hard majority voting.

    Confidence is the fraction of trees voting for the predicted label, so
    it always lies on the k / n_trees grid.  Vote ties go to the
    lexicographically smallest label.
    """

    def __init__(self, model: RandomForestClassifier, encoder: _Encoder):
        self.model = model
        self.encoder = encoder

    @property
    def n_trees(self) -> int:
        return len(self.model.estimators_)

    def predict_with_confidence(self, d: Dataset):
        x = self.encoder.transform(d)
        n = x.shape[0]
        classes = self.model.classes_
        counts = np.zeros((n, len(classes)), dtype=np.int64)
        rows = np.arange(n)
        for est in self.model.estimators_:
            codes = est.predict(x).astype(np.int64)
            counts[rows, codes] += 1
        winner = np.argmax(counts, axis=1)
        confidence = counts[rows, winner] / self.n_trees
        labels = [str(classes[w]) for w in winner]
        return labels, confidence


def train_forest(train: Dataset, params: ForestParams = ForestParams()) -> Forest:
    """Fit the built-in forest on a labeled split.

    A single-tree forest drops the bootstrap, so with unlimited depth and
    min_leaf 1 it memorizes duplicate-free training data.  A single-class
    target yields a constant predictor with confidence 1.
    """
    if train.y is None:
        raise DatasetError("train_forest needs labels")
    if params.n_trees < 1:
        raise ValueError("n_trees must be positive")
    encoder = _Encoder().fit(train)
    x = encoder.transform(train)
    y = np.array([lab.strip() for lab in train.y], dtype=object)
    model = RandomForestClassifier(
        n_estimators=params.n_trees,
        max_depth=params.max_depth,
        min_samples_leaf=params.min_leaf,
        max_features=params.features_per_split,
        bootstrap=params.n_trees > 1,
        random_state=params.seed % (2**32),
        n_jobs=1,
    )
    model.fit(x, y)
    return Forest(model, encoder)


# -- configuration -------------------------------------------------------


@dataclass(frozen=True)
class PredictionSource:
    """Where per-split predictions come from.

    builtin_forest trains on each split's train partition; external reads
    one prediction CSV per split with columns row_id, prediction, and
    optionally confidence, keyed by row index into the source dataset.
    """

    kind: str = "builtin_forest"
    forest: ForestParams = ForestParams()
    files: tuple = ()

    def __post_init__(self):
        if self.kind not in ("builtin_forest", "external"):
            raise ConfigError(f"unknown prediction source {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "builtin_forest":
            return {"builtin_forest": self.forest.to_dict()}
        return {"external": {"files": list(self.files)}}


@dataclass(frozen=True)
class ExperimentConfig:
    data: str
    schema: dict
    label_col: str | None = None
    q_count: int = 10
    fractions: tuple = (0.70, 0.15, 0.15)
    max_budget: float = 0.20
    budget_delta: float = 0.01
    slices: SliceConfig = SliceConfig()
    strategies: tuple = STRATEGIES
    seed: int = 0
    predictions: PredictionSource = PredictionSource()
    store_attention_sets: bool = False

    def __post_init__(self):
        if self.q_count < 1:
            raise ConfigError("q_count must be positive")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies: {unknown}")
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        try:
            BudgetGrid.uniform(self.max_budget, self.budget_delta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.predictions.kind == "external" and len(self.predictions.files) != self.q_count:
            raise ConfigError("external predictions need exactly one file per split")

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "schema": dict(self.schema),
            "label_col": self.label_col,
            "q_count": self.q_count,
            "fractions": list(self.fractions),
            "max_budget": self.max_budget,
            "budget_delta": self.budget_delta,
            "slices": {
                "max_combo": self.slices.max_combo,
                "min_support": self.slices.min_support,
                "accuracy_threshold": self.slices.accuracy_threshold,
                "alpha": self.slices.alpha,
                "max_depth": self.slices.max_depth,
                "min_leaf": self.slices.min_leaf,
            },
            "strategies": list(self.strategies),
            "seed": self.seed,
            "predictions": self.predictions.to_dict(),
            "store_attention_sets": self.store_attention_sets,
        }


def config_from_dict(obj: dict, base_dir: str | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON, resolving relative paths."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    if "data" not in obj or "schema" not in obj:
        raise ConfigError("config needs 'data' and 'schema'")

    def resolve(path):
        if base_dir is not None and not os.path.isabs(path):
            return os.path.join(base_dir, path)
        return path

    known = {
        "data", "schema", "label_col", "q_count", "fractions", "max_budget",
        "budget_delta", "slices", "strategies", "seed", "predictions",
        "store_attention_sets",
    }
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")

    predictions = PredictionSource()
    raw_pred = obj.get("predictions")
    if raw_pred is not None:
        if not isinstance(raw_pred, dict) or len(raw_pred) != 1:
            raise ConfigError("predictions must name exactly one source")
        kind, body = next(iter(raw_pred.items()))
        if kind == "builtin_forest":
            try:
                params = ForestParams(**(body or {}))
            except TypeError as exc:
                raise ConfigError(f"bad forest params: {exc}") from None
            predictions = PredictionSource(kind="builtin_forest", forest=params)
        elif kind == "external":
            files = tuple(resolve(p) for p in (body or {}).get("files", ()))
            predictions = PredictionSource(kind="external", files=files)
        else:
            raise ConfigError(f"unknown prediction source {kind!r}")

    slice_cfg = SliceConfig()
    if obj.get("slices") is not None:
        try:
            slice_cfg = SliceConfig(**obj["slices"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad slice config: {exc}") from None

    try:
        return ExperimentConfig(
            data=resolve(obj["data"]),
            schema=dict(obj["schema"]),
            label_col=obj.get("label_col"),
            q_count=int(obj.get("q_count", 10)),
            fractions=tuple(obj.get("fractions", (0.70, 0.15, 0.15))),
            max_budget=float(obj.get("max_budget", 0.20)),
            budget_delta=float(obj.get("budget_delta", 0.01)),
            slices=slice_cfg,
            strategies=tuple(obj.get("strategies", STRATEGIES)),
            seed=int(obj.get("seed", 0)),
            predictions=predictions,
            store_attention_sets=bool(obj.get("store_attention_sets", False)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


# -- per-split pipeline --------------------------------------------------


def _read_prediction_file(path: str) -> dict:
    """row_id -> (prediction, confidence or NaN) from an external CSV."""
    out = {}
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot read predictions {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty prediction file") from None
        cols = {name: i for i, name in enumerate(header)}
        if "row_id" not in cols or "prediction" not in cols:
            raise DatasetError(f"{path}: prediction files need row_id and prediction columns")
        conf_pos = cols.get("confidence")
        for line_no, row in enumerate(reader, start=2):
            try:
                row_id = int(row[cols["row_id"]])
            except (ValueError, IndexError):
                raise DatasetError(f"{path} line {line_no}: bad row_id") from None
            conf = math.nan
            if conf_pos is not None and row[conf_pos].strip() != "":
                conf = float(row[conf_pos])
                if not 0.0 <= conf <= 1.0:
                    raise DatasetError(f"{path} line {line_no}: confidence outside [0, 1]")
            out[row_id] = (row[cols["prediction"]], conf)
    return out


def _attach_external(part: Dataset, indices: np.ndarray, table: dict, path: str) -> Dataset:
    preds = []
    confs = np.empty(indices.size, dtype=np.float64)
    for pos, idx in enumerate(indices):
        if int(idx) not in table:
            raise DatasetError(f"{path}: missing prediction for row {int(idx)}")
        pred, conf = table[int(idx)]
        preds.append(pred)
        confs[pos] = conf
    if np.isnan(confs).all():
        return derive_z(part.with_predictions(preds))
    return derive_z(part.with_predictions(preds, confs))


def prepare_split(source: Dataset, split, cfg: ExperimentConfig):
    """Produce the build and eval datasets of one split, with z attached."""
    d_build = subset(source, split.build)
    d_eval = subset(source, split.eval)
    if cfg.predictions.kind == "builtin_forest":
        d_train = subset(source, split.train)
        params = cfg.predictions.forest
        forest = train_forest(
            d_train,
            ForestParams(
                n_trees=params.n_trees,
                max_depth=params.max_depth,
                min_leaf=params.min_leaf,
                features_per_split=params.features_per_split,
                seed=derive_seed(cfg.seed, "forest", split.q),
            ),
        )
        build = derive_z(d_build.with_predictions(*forest.predict_with_confidence(d_build)))
        d_eval = derive_z(d_eval.with_predictions(*forest.predict_with_confidence(d_eval)))
        return build, d_eval
    path = cfg.predictions.files[split.q - 1]
    table = _read_prediction_file(path)
    build = _attach_external(d_build, split.build, table, path)
    d_eval = _attach_external(d_eval, split.eval, table, path)
    return build, d_eval


def run_split(build: Dataset, d_eval: Dataset, cfg: ExperimentConfig, grid: BudgetGrid, q: int) -> dict:
    """Fit slices and strategies on build, score on build and eval.

    Pure function of (build, eval, cfg, q); eval influences nothing that is
    fitted.  Returns the JSON-ready split record plus the fitted objects.
    """
    slices = find_slices(build, cfg.slices)
    records = {}
    rules = {}
    build_sfs = {}
    for name in cfg.strategies:
        seed = derive_seed(cfg.seed, "strategy", name, q)
        try:
            rule = fit_strategy(name, build, cfg.max_budget, slices=slices, seed=seed)
        except FitFailure as failure:
            records[name] = {
                "fit_failure": failure.reason,
                "auc_build": None,
                "auc_eval": None,
                "generalizability": None,
                "build": None,
                "eval": None,
            }
            continue
        rules[name] = rule
        sf_build = step_function(rule, build, grid)
        sf_eval = step_function(rule, d_eval, grid) if d_eval.error_count > 0 else None
        build_sfs[name] = sf_build
        record = {
            "fit_failure": None,
            "auc_build": auc(sf_build),
            "auc_eval": None if sf_eval is None else auc(sf_eval),
            "generalizability": None if sf_eval is None else generalizability(sf_build, sf_eval),
            "build": sf_build.to_dict(),
            "eval": None if sf_eval is None else sf_eval.to_dict(),
        }
        if cfg.store_attention_sets:
            record["attention_sets"] = {
                "build": _sets_along_grid(rule, build, grid),
                "eval": _sets_along_grid(rule, d_eval, grid),
            }
        records[name] = record
    return {
        "q": q,
        "rows": {"build": build.n_rows, "eval": d_eval.n_rows},
        "mcr": {
            "build": build.mcr,
            "eval": d_eval.mcr,
            "test": (build.error_count + d_eval.error_count) / (build.n_rows + d_eval.n_rows),
        },
        "n_slices": len(slices),
        "strategies": records,
        "_slices": slices,
        "_rules": rules,
        "_build_sfs": build_sfs,
    }


def _sets_along_grid(rule, target: Dataset, grid: BudgetGrid):
    out = []
    for b in grid.budgets:
        att = materialize(rule, target, b)
        out.append(None if att is None else [int(i) for i in att.indices])
    return out


# -- experiment driver ---------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> dict:
    """Run the full pipeline and return the JSON-ready report.

    With out_dir set, also writes report.json, per-split slice and rule
    files, and per-strategy step CSVs, all atomically.
    """
    source = load_csv(cfg.data, cfg.schema, label_col=cfg.label_col)
    splits = make_splits(source, cfg.fractions, cfg.q_count, cfg.seed)
    grid = BudgetGrid.uniform(cfg.max_budget, cfg.budget_delta)

    split_records = []
    for split in splits:
        build, d_eval = prepare_split(source, split, cfg)
        split_records.append(run_split(build, d_eval, cfg, grid, split.q))

    scorecards = {}
    for name in cfg.strategies:
        per = [rec["strategies"][name] for rec in split_records]
        auc_build, auc_build_undef = mean_over_splits([r["auc_build"] for r in per])
        auc_eval, _ = mean_over_splits([r["auc_eval"] for r in per])
        gen, _ = mean_over_splits([r["generalizability"] for r in per])
        fitted_sfs = [rec["_build_sfs"][name] for rec in split_records if name in rec["_build_sfs"]]
        stab = stability(fitted_sfs) if len(fitted_sfs) >= 2 else None
        scorecards[name] = {
            "auc_build": auc_build,
            "auc_eval": auc_eval,
            "generalizability": gen,
            "stability": stab,
            "fit_failures": sum(1 for r in per if r["fit_failure"] is not None),
            "undefined_auc_splits": auc_build_undef,
            "topsis": None,
        }

    ranked = [
        name
        for name in cfg.strategies
        if all(scorecards[name][k] is not None for k in ("auc_build", "generalizability", "stability"))
    ]
    if ranked:
        matrix = [
            [scorecards[n]["auc_build"], scorecards[n]["generalizability"], scorecards[n]["stability"]]
            for n in ranked
        ]
        scores = topsis(matrix)
        for name, score in zip(ranked, scores):
            scorecards[name]["topsis"] = float(score)

    report = {
        "config": cfg.to_dict(),
        "budgets": list(grid.budgets),
        "splits": [
            {k: v for k, v in rec.items() if not k.startswith("_")} for rec in split_records
        ],
        "scorecards": scorecards,
        "ranking": sorted(
            ranked, key=lambda n: (-scorecards[n]["topsis"], n)
        ),
        "unranked": [n for n in cfg.strategies if n not in ranked],
    }

    if out_dir is not None:
        _write_artifacts(report, split_records, out_dir)
    return report


def _steps_csv(sf_dict: dict | None, budgets) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["budget", "size", "frac_size", "error_count", "coverage", "error_rate", "harmonic"]
    )
    stats = sf_dict["stats"] if sf_dict is not None else [None] * len(budgets)
    for b, st in zip(budgets, stats):
        if st is None:
            writer.writerow([b, "", "", "", "", "", ""])
        else:
            writer.writerow(
                [
                    b,
                    st["size"],
                    st["frac_size"],
                    st["error_count"],
                    st["coverage"],
                    st["error_rate"],
                    st["harmonic"],
                ]
            )
    return buf.getvalue()


def _write_artifacts(report: dict, split_records, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_json(os.path.join(out_dir, "report.json"), report)
    budgets = report["budgets"]
    for rec in split_records:
        q = rec["q"]
        atomic_write_json(
            os.path.join(out_dir, f"slices_{q}.json"),
            [s.to_dict() for s in rec["_slices"]],
        )
        rules_obj = {}
        for name, strat_rec in rec["strategies"].items():
            if strat_rec["fit_failure"] is not None:
                rules_obj[name] = {"fit_failure": strat_rec["fit_failure"]}
            else:
                rules_obj[name] = rec["_rules"][name].to_dict()
        atomic_write_json(os.path.join(out_dir, f"rules_{q}.json"), rules_obj)
        for name, strat_rec in rec["strategies"].items():
            for side in ("build", "eval"):
                path = os.path.join(out_dir, f"steps_{name}_{q}_{side}.csv")
                atomic_write_text(path, _steps_csv(strat_rec[side], budgets))


# -- plot series ---------------------------------------------------------


def plot_data(report: dict) -> dict:
    """Plot-ready series from a report: per-strategy means plus the best-case curve.

    For each strategy and side, the fractional size, coverage, and harmonic
    score are averaged per budget over the splits where the rule was
    defined.  The best-case harmonic curve uses the mean build error rate
    and peaks at a fraction equal to it.
    """
    from .metrics import best_harmonic_curve

    budgets = report["budgets"]
    splits = report["splits"]
    mcr_values = [rec["mcr"]["build"] for rec in splits]
    mcr = float(np.mean(mcr_values))

    strategies = {}
    for name in report["config"]["strategies"]:
        sides = {}
        for side in ("build", "eval"):
            series = {"budgets": list(budgets), "frac_size": [], "coverage": [], "harmonic": []}
            for pos in range(len(budgets)):
                cells = []
                for rec in splits:
                    sf = rec["strategies"][name][side]
                    if sf is None:
                        continue
                    st = sf["stats"][pos]
                    if st is not None:
                        cells.append((st["frac_size"], st["coverage"], st["harmonic"]))
                if cells:
                    series["frac_size"].append(float(np.mean([c[0] for c in cells])))
                    series["coverage"].append(float(np.mean([c[1] for c in cells])))
                    harmonics = [c[2] for c in cells if c[2] is not None]
                    series["harmonic"].append(
                        float(np.mean(harmonics)) if harmonics else None
                    )
                else:
                    series["frac_size"].append(None)
                    series["coverage"].append(None)
                    series["harmonic"].append(None)
            sides[side] = series
        strategies[name] = sides

    limit = max(float(budgets[-1]), min(1.0, 2.0 * mcr))
    fracs = np.unique(np.concatenate([np.linspace(0.0, limit, 201), [mcr]]))
    best = best_harmonic_curve(mcr, fracs)
    return {
        "mcr": mcr,
        "strategies": strategies,
        "best_harmonic": {
            "frac_size": [float(v) for v in fracs],
            "harmonic": [float(v) for v in best],
        },
    }
