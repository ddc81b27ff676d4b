"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 fit-failure
(a strategy produced no defined rule, a machine-readable reason goes to
stderr), 4 data error.  Every output file is written atomically after its
inputs validate.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .dataset import DatasetError, derive_z, load_csv
from .harness import ConfigError, config_from_dict, plot_data, run_experiment
from .metrics import attention_stats
from .slicing import SliceConfig, find_slices
from .strategies import (
    SLICE_STRATEGIES,
    STRATEGIES,
    FitFailure,
    SliceUnionRule,
    fit_strategy,
    materialize,
    rule_from_dict,
)
from .util import atomic_write_json, atomic_write_text

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FIT_FAILURE = 3
EXIT_DATA = 4

DEFAULT_SEED = 0


def _read_json(path: str, what: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DatasetError(f"cannot read {what} {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


def _load_schema(path: str) -> dict:
    schema = _read_json(path, "schema")
    if not isinstance(schema, dict):
        raise ConfigError(f"schema {path} must map column names to kinds")
    return schema


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="input CSV")
    parser.add_argument("--schema", required=True, help="JSON file mapping feature columns to kinds")
    parser.add_argument("--label-col", default=None, help="label column (default: 'label')")
    parser.add_argument("--pred-col", default=None, help="prediction column (default: 'prediction' when present)")
    parser.add_argument("--conf-col", default=None, help="confidence column (default: 'confidence' when present)")


def _load_dataset(args, with_z: bool):
    d = load_csv(
        args.data,
        _load_schema(args.schema),
        label_col=args.label_col,
        pred_col=args.pred_col,
        conf_col=args.conf_col,
    )
    return derive_z(d) if with_z else d


def _slice_config(args) -> SliceConfig:
    try:
        return SliceConfig(
            max_combo=args.max_combo,
            min_support=args.min_support,
            accuracy_threshold=args.accuracy_threshold,
            alpha=args.alpha,
            max_depth=args.max_depth,
            min_leaf=args.min_leaf,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- subcommands ---------------------------------------------------------


def cmd_slices(args) -> int:
    build = _load_dataset(args, with_z=True)
    slices = find_slices(build, _slice_config(args))
    atomic_write_json(args.out, [s.to_dict() for s in slices])
    print(f"{len(slices)} slices on {build.n_rows} rows ({build.error_count} errors) -> {args.out}")
    top = sorted(slices, key=lambda s: (-s.rank, s.p_value))[:10]
    for s in top:
        print(
            f"  rank={s.rank:.3f} support={s.support} errors={s.errors} "
            f"p={s.p_value:.2e}  {s.describe()}"
        )
    return EXIT_OK


def cmd_fit(args) -> int:
    build = _load_dataset(args, with_z=True)
    slices = None
    if args.strategy in SLICE_STRATEGIES:
        if args.slices is None:
            raise ConfigError(f"{args.strategy} needs --slices")
        from .slicing import Slice

        slices = [Slice.from_dict(obj) for obj in _read_json(args.slices, "slices")]
    rule = fit_strategy(args.strategy, build, args.budget, slices=slices, seed=args.seed)
    atomic_write_json(args.out, rule.to_dict())
    print(f"fitted {args.strategy} at budget {args.budget} on {build.n_rows} rows -> {args.out}")
    return EXIT_OK


def cmd_apply(args) -> int:
    rule = rule_from_dict(_read_json(args.rule, "rule"))
    target = load_csv(
        args.data,
        _load_schema(args.schema),
        label_col=args.label_col,
        pred_col=args.pred_col,
        conf_col=args.conf_col,
    )
    budget = rule.max_budget if args.budget is None else args.budget
    attention = materialize(rule, target, budget)
    if attention is None:
        print(
            json.dumps(
                {"fit_failure": {"strategy": rule.strategy, "reason": f"rule undefined at budget {budget}"}}
            ),
            file=sys.stderr,
        )
        return EXIT_FIT_FAILURE
    provenance = {}
    if isinstance(rule, SliceUnionRule):
        provenance = rule.member_slices(target, budget)
    import csv as _csv
    import io as _io

    buf = _io.StringIO()
    writer = _csv.writer(buf)
    writer.writerow(["row_index", "slices"])
    for idx in attention.indices:
        covering = provenance.get(int(idx), [])
        writer.writerow([int(idx), ";".join(str(p) for p in covering)])
    atomic_write_text(args.out, buf.getvalue())
    frac = attention.size / target.n_rows
    print(f"{attention.size} rows ({frac:.3f} of target) at budget {budget} -> {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    d = _load_dataset(args, with_z=True)
    import csv as _csv

    try:
        fh = open(args.attention, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot read attention set {args.attention}: {exc}") from None
    with fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or "row_index" not in header:
            raise DatasetError(f"{args.attention}: expected a row_index column")
        pos = header.index("row_index")
        try:
            indices = [int(row[pos]) for row in reader]
        except (ValueError, IndexError):
            raise DatasetError(f"{args.attention}: bad row_index value") from None
    stats = attention_stats(d, indices)
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        atomic_write_text(args.out, text + "\n")
    return EXIT_OK


def cmd_experiment(args) -> int:
    obj = _read_json(args.config, "config")
    cfg = config_from_dict(obj, base_dir=os.path.dirname(os.path.abspath(args.config)))
    if not os.path.isfile(cfg.data):
        raise DatasetError(f"data file not found: {cfg.data}")
    if cfg.predictions.kind == "external":
        for path in cfg.predictions.files:
            if not os.path.isfile(path):
                raise DatasetError(f"prediction file not found: {path}")
    if args.dry_run:
        print("config OK")
        return EXIT_OK
    if args.out_dir is None:
        raise ConfigError("--out-dir is required unless --dry-run")
    report = run_experiment(cfg, out_dir=args.out_dir)
    print(f"report -> {os.path.join(args.out_dir, 'report.json')}")
    for name in report["ranking"]:
        card = report["scorecards"][name]
        print(
            f"  {name}: topsis={card['topsis']:.4f} auc_build={card['auc_build']:.4f} "
            f"G={card['generalizability']:.4f} V={card['stability']:.6f}"
        )
    for name in report["unranked"]:
        print(f"  {name}: unranked (undefined metrics)")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    report = _read_json(args.report, "report")
    try:
        series = plot_data(report)
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{args.report} is not a report file: {exc}") from None
    atomic_write_json(args.out, series)
    print(f"plot series -> {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="errloc",
        description="Localize classifier errors with budget-constrained attention sets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slices", help="discover error slices on a build CSV")
    _add_data_args(p)
    p.add_argument("--max-combo", type=int, default=2, help="largest feature combination (1..3)")
    p.add_argument("--min-support", type=int, default=None)
    p.add_argument("--accuracy-threshold", type=float, default=None)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--min-leaf", type=int, default=None)
    p.add_argument("--out", required=True, help="output slices JSON")
    p.set_defaults(func=cmd_slices)

    p = sub.add_parser("fit", help="fit an attention rule on a build CSV")
    _add_data_args(p)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--budget", type=float, default=0.20, help="maximum budget B")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    p.add_argument("--slices", default=None, help="slices JSON (required for slice strategies)")
    p.add_argument("--out", required=True, help="output rule JSON")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("apply", help="materialize a fitted rule on a target CSV")
    _add_data_args(p)
    p.add_argument("--rule", required=True, help="rule JSON from fit")
    p.add_argument("--budget", type=float, default=None, help="budget b (default: the rule's B)")
    p.add_argument("--out", required=True, help="output attention-set CSV")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("stats", help="statistics of an attention set on a labeled CSV")
    _add_data_args(p)
    p.add_argument("--attention", required=True, help="attention-set CSV from apply")
    p.add_argument("--out", default=None, help="optional output JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("experiment", help="run the full multi-split experiment")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out-dir", default=None, help="artifact directory")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot-data", help="plot-ready series from a report")
    p.add_argument("--report", required=True, help="report.json from experiment")
    p.add_argument("--out", required=True, help="output JSON")
    p.set_defaults(func=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FitFailure as failure:
        print(
            json.dumps({"fit_failure": {"strategy": failure.strategy, "reason": failure.reason}}),
            file=sys.stderr,
        )
        return EXIT_FIT_FAILURE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
