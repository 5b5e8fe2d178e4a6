"""Decision-centric fairness: training under top-k% demographic-parity penalties and evaluation
on the decision region [tau, 1]."""

from .data import (BiasSpec, DataSchema, LabeledDataset, SplitSpec, group_label_table,
                   inject_bias, load_csv, split)
from .errors import (ConfigError, DcfairError, DomainError, ExperimentError, SchemaError,
                     ShapeError, SpecError, StateError, TrainingDiverged)
from .experiment import (RunRecord, SearchSpace, SweepSpec, emit_report, grid_search,
                         pareto_front, sweep)
from .losses import FairnessMode, SinkhornConfig, composite_loss, exact_w1, sinkhorn_w1
from .metrics import GridSpec, MetricReport, ScoreSet, abcc_tau, abpc_tau, auc_pr_tau, evaluate
from .model import MlpConfig, MlpParameters, init_model
from .training import TrainConfig, TrainHistory, calibrated_train, predict, train

__version__ = "0.1.0"

__all__ = [
    "BiasSpec", "DataSchema", "LabeledDataset", "SplitSpec", "group_label_table", "inject_bias",
    "load_csv", "split",
    "ConfigError", "DcfairError", "DomainError", "ExperimentError", "SchemaError", "ShapeError",
    "SpecError", "StateError", "TrainingDiverged",
    "RunRecord", "SearchSpace", "SweepSpec", "emit_report", "grid_search", "pareto_front", "sweep",
    "FairnessMode", "SinkhornConfig", "composite_loss", "exact_w1", "sinkhorn_w1",
    "GridSpec", "MetricReport", "ScoreSet", "abcc_tau", "abpc_tau", "auc_pr_tau", "evaluate",
    "MlpConfig", "MlpParameters", "init_model",
    "TrainConfig", "TrainHistory", "calibrated_train", "predict", "train",
]
