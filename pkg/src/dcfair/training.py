"""Mini-batch training with BCE warmup, composite loss and early stopping."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, ShapeError, TrainingDiverged
from .losses import (DEFAULT_K_MIN, FairnessMode, SinkhornConfig, calibrate_k_pct,
                     composite_loss)
from .metrics import ScoreSet
from .model import AdamState, MlpConfig, MlpParameters, adam_step, backward, forward, init_model


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    warmup_epochs: int = 15
    early_stop_patience: int = 20
    max_epochs: int = 300
    lam: float = 0.0
    mode: FairnessMode = FairnessMode.none()
    tau: float = 0.0
    shuffle_seed: int = 0
    sinkhorn: SinkhornConfig = SinkhornConfig()
    k_min: float = DEFAULT_K_MIN
    # record the validation penalty of lambda=0 runs (global mode when no mode is set)
    record_penalty_at_zero_lambda: bool = True

    def __post_init__(self):
        if self.batch_size < 64:
            raise ConfigError("batch_size must be at least 64")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigError("need 0 <= warmup_epochs < max_epochs")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")
        if not 0.0 <= self.lam < 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1)")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1)")
        if not 0.0 < self.k_min <= 1.0:
            raise ConfigError("k_min must lie in (0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = {"kind": self.mode.kind, "k_pct": self.mode.k_pct}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        mode = d.get("mode")
        if isinstance(mode, str):
            d["mode"] = FairnessMode.parse(mode)
        elif isinstance(mode, dict):
            d["mode"] = FairnessMode(mode.get("kind", "none"), mode.get("k_pct"))
        if isinstance(d.get("sinkhorn"), dict):
            d["sinkhorn"] = SinkhornConfig(**d["sinkhorn"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lam: float
    train_loss: float
    val_loss: float
    val_bce: float
    val_unfairness: float
    skipped_batches: int


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self, path: str | Path) -> None:
        names = list(EpochRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names + ["best"])
            for rec in self.epochs:
                w.writerow([repr(getattr(rec, k)) for k in names] + [int(rec.epoch == self.best_epoch)])


@dataclass
class TrainedModel:
    params: MlpParameters
    train_config: TrainConfig
    preprocessor: Any = None

    @property
    def k_pct(self) -> float | None:
        return self.train_config.mode.k_pct


def _check_groups(ds: LabeledDataset, what: str) -> None:
    n0, n1 = ds.group_sizes()
    if n0 == 0 or n1 == 0:
        raise ConfigError(f"{what} data lacks a protected group (sizes {n0}, {n1})")


def validation_loss(params: MlpParameters, val_ds: LabeledDataset, lam: float,
                    mode: FairnessMode, cfg: TrainConfig):
    """Full-set composite loss in evaluation mode, as recorded after each epoch."""
    if lam == 0.0 and mode.kind == "none" and cfg.record_penalty_at_zero_lambda:
        mode = FairnessMode.global_()
    if lam == 0.0 and not cfg.record_penalty_at_zero_lambda:
        mode = FairnessMode.none()
    scores, _ = forward(params, val_ds.features)
    value, _ = composite_loss(scores, val_ds.labels, val_ds.protected, lam, mode, cfg.sinkhorn)
    return value


def train(train_ds: LabeledDataset, val_ds: LabeledDataset, mlp_config: MlpConfig,
          cfg: TrainConfig) -> tuple[TrainedModel, TrainHistory]:
    """Train one model; returns the snapshot with the lowest validation loss.

    Epochs up to ``warmup_epochs`` run with lambda = 0. One generator seeded by
    ``shuffle_seed`` draws every epoch permutation and per-batch dropout seed,
    so batches do not depend on lambda or mode.
    """
    _check_groups(train_ds, "training")
    if cfg.mode.kind == "decision_centric" and cfg.mode.k_pct is None:
        raise ConfigError("decision-centric training needs k_pct; use calibrated_train")
    if train_ds.n_features != val_ds.n_features:
        raise ShapeError("training and validation feature widths differ")
    params = init_model(train_ds.n_features, mlp_config)
    adam = AdamState.zeros(params)
    rng = np.random.default_rng(cfg.shuffle_seed)
    X, y, s = train_ds.features, train_ds.labels, train_ds.protected
    n = len(train_ds)
    history = TrainHistory()
    best_loss = np.inf
    best_params = params.copy()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lam = 0.0 if epoch <= cfg.warmup_epochs else cfg.lam
        batch_mode = cfg.mode if lam > 0 else FairnessMode.none()
        perm = rng.permutation(n)
        total, skipped = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            dropout_seed = int(rng.integers(2**63 - 1))
            scores, cache = forward(params, X[idx], training=True, dropout_seed=dropout_seed)
            value, grad = composite_loss(scores, y[idx], s[idx], lam, batch_mode, cfg.sinkhorn)
            if not np.isfinite(value.total):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}", history)
            params, adam = adam_step(params, backward(cache, grad), adam)
            if not params.is_finite():
                raise TrainingDiverged(f"non-finite parameters at epoch {epoch}", history)
            total += value.total * idx.size
            skipped += int(value.penalty_skipped)
        val = validation_loss(params, val_ds, lam, cfg.mode, cfg)
        if not np.isfinite(val.total):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", history)
        history.epochs.append(EpochRecord(epoch, lam, total / n, val.total, val.bce_part,
                                          val.unfairness_part, skipped))
        if val.total < best_loss:
            best_loss = val.total
            best_params = params.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                history.stop_reason = "early"
                break
    else:
        history.stop_reason = "max_epochs"
    return TrainedModel(best_params, cfg), history


@dataclass
class CalibratedRun:
    model: TrainedModel
    history: TrainHistory
    k_pct: float
    baseline_model: TrainedModel
    baseline_history: TrainHistory


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    return replace(cfg, lam=0.0, mode=FairnessMode.global_())


def calibrated_train(train_ds: LabeledDataset, val_ds: LabeledDataset, mlp_config: MlpConfig,
                     cfg: TrainConfig,
                     baseline: tuple[TrainedModel, TrainHistory] | None = None) -> CalibratedRun:
    """Decision-centric training with k_pct taken from a lambda=0 baseline.

    The baseline uses the same seeds; pass a finished one to reuse it.
    """
    if cfg.mode.kind != "decision_centric":
        raise ConfigError("calibrated_train needs decision-centric mode")
    if baseline is None:
        baseline = train(train_ds, val_ds, mlp_config, baseline_config(cfg))
    base_model, base_history = baseline
    k_pct = calibrate_k_pct(predict(base_model, val_ds), cfg.tau, cfg.k_min)
    tuned = replace(cfg, mode=FairnessMode.decision_centric(k_pct))
    model, history = train(train_ds, val_ds, mlp_config, tuned)
    return CalibratedRun(model, history, k_pct, base_model, base_history)


def predict(model: TrainedModel | MlpParameters, ds: LabeledDataset) -> ScoreSet:
    params = model.params if isinstance(model, TrainedModel) else model
    scores, _ = forward(params, ds.features)
    return ScoreSet(scores, ds.labels, ds.protected)
