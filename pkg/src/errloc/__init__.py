"""Localize classifier errors in tabular data with budget-constrained attention sets."""

from .dataset import (
    CATEGORICAL,
    NUMERIC,
    Column,
    Dataset,
    DatasetError,
    ParseError,
    SchemaError,
    SplitSet,
    derive_z,
    load_csv,
    make_splits,
    subset,
    write_csv,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    Forest,
    ForestParams,
    PredictionSource,
    config_from_dict,
    plot_data,
    run_experiment,
    train_forest,
)
from .metrics import (
    AttentionStats,
    StepFunction,
    attention_stats,
    auc,
    best_harmonic_curve,
    generalizability,
    stability,
    step_function,
    topsis,
)
from .slicing import (
    Predicate,
    Slice,
    SliceConfig,
    find_slices,
    grow_tree,
    hypergeom_p,
    make_slice,
    rank_slices,
)
from .strategies import (
    SLICE_STRATEGIES,
    STRATEGIES,
    AttentionRule,
    AttentionSet,
    BudgetGrid,
    FitFailure,
    fit_confidence,
    fit_random_order,
    fit_random_subset,
    fit_rank_order,
    fit_set_cover,
    fit_strategy,
    fit_worst_label,
    materialize,
    rule_from_dict,
)

__version__ = "0.1.0"
