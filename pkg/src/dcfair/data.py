"""Tabular ingestion, preprocessing, splitting and informed label flipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
import pandas as pd

from ._util import ceil_count, floor_count
from .errors import DomainError, SchemaError, SpecError

logger = logging.getLogger(__name__)

LABEL_COLUMN = "__y"
PROTECTED_COLUMN = "__s"
ROW_ID_COLUMN = "__row_id"
_RESERVED = (LABEL_COLUMN, PROTECTED_COLUMN, ROW_ID_COLUMN)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: Literal["numeric", "categorical"]

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class DataSchema:
    """Column roles of a raw CSV.

    The protected attribute is never one of ``feature_columns``; set
    ``protected_as_feature`` to append it as an extra 0/1 model input.
    """

    target_column: str
    protected_column: str
    positive_label: str
    protected_one_value: str
    feature_columns: tuple[FeatureSpec, ...]
    protected_as_feature: bool = False

    def __post_init__(self):
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))
        object.__setattr__(self, "positive_label", str(self.positive_label))
        object.__setattr__(self, "protected_one_value", str(self.protected_one_value))
        names = [f.name for f in self.feature_columns]
        if not names:
            raise SchemaError("schema needs at least one feature column")
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature columns")
        if self.target_column in names:
            raise SchemaError("target column listed as a feature")
        if self.protected_column in names:
            raise SchemaError("protected column listed as a feature")

    @property
    def columns(self) -> list[str]:
        return [self.target_column, self.protected_column] + [f.name for f in self.feature_columns]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DataSchema":
        feats = []
        for item in d["features"]:
            if isinstance(item, str):
                feats.append(FeatureSpec(item, "numeric"))
            else:
                feats.append(FeatureSpec(item["name"], item.get("kind", "numeric")))
        return cls(
            target_column=d["target_column"],
            protected_column=d["protected_column"],
            positive_label=d["positive_label"],
            protected_one_value=d["protected_one_value"],
            feature_columns=tuple(feats),
            protected_as_feature=bool(d.get("protected_as_feature", False)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_column": self.target_column,
            "protected_column": self.protected_column,
            "positive_label": self.positive_label,
            "protected_one_value": self.protected_one_value,
            "protected_as_feature": self.protected_as_feature,
            "features": [{"name": f.name, "kind": f.kind} for f in self.feature_columns],
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Encoded features with binary labels ``y`` and protected attribute ``s``.

    ``source`` optionally keeps the raw CSV rows (aligned with ``row_ids``) so
    that a dataset can be written back with its original columns.
    """

    features: np.ndarray
    labels: np.ndarray
    protected: np.ndarray
    row_ids: np.ndarray
    feature_names: tuple[str, ...] = ()
    source: pd.DataFrame | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise DomainError("features must be a 2-D matrix")
        y = np.asarray(self.labels).astype(np.int64)
        s = np.asarray(self.protected).astype(np.int64)
        ids = np.asarray(self.row_ids).astype(np.int64)
        n = X.shape[0]
        if n == 0:
            raise DomainError("dataset is empty")
        if not (len(y) == len(s) == len(ids) == n):
            raise DomainError("features, labels, protected and row_ids differ in length")
        if not np.isin(y, (0, 1)).all() or not np.isin(s, (0, 1)).all():
            raise DomainError("labels and protected attribute must be binary")
        if not np.isfinite(X).all():
            raise DomainError("non-finite encoded feature")
        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DomainError("feature_names does not match feature width")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "protected", _frozen(s))
        object.__setattr__(self, "row_ids", _frozen(ids))
        object.__setattr__(self, "feature_names", names)
        if self.source is not None and len(self.source) != n:
            raise DomainError("source frame is not aligned with the dataset")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray | Sequence[int]) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        src = None if self.source is None else self.source.iloc[index].reset_index(drop=True)
        return LabeledDataset(
            self.features[index], self.labels[index], self.protected[index],
            self.row_ids[index], self.feature_names, src,
        )

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        return replace(self, labels=np.asarray(labels))

    def group_sizes(self) -> tuple[int, int]:
        n1 = int(self.protected.sum())
        return len(self) - n1, n1


@dataclass
class Preprocessor:
    """Encoding statistics: one-hot levels and standardization moments."""

    schema: DataSchema
    means: dict[str, float]
    stds: dict[str, float]
    levels: dict[str, list[str]]

    @classmethod
    def fit(cls, frame: pd.DataFrame, schema: DataSchema) -> "Preprocessor":
        means, stds, levels = {}, {}, {}
        for f in schema.feature_columns:
            if f.kind == "numeric":
                col = frame[f.name].astype(np.float64).to_numpy()
                if col.min() == col.max():
                    # constant column: exact zeros after centring, std fallback 1
                    means[f.name], stds[f.name] = float(col[0]), 1.0
                    continue
                means[f.name] = float(col.mean())
                sd = float(col.std())
                stds[f.name] = sd if sd > 1e-12 * max(1.0, abs(means[f.name])) else 1.0
            else:
                levels[f.name] = sorted(frame[f.name].astype(str).unique().tolist())
        return cls(schema, means, stds, levels)

    @property
    def feature_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for f in self.schema.feature_columns:
            if f.kind == "numeric":
                names.append(f.name)
            else:
                lv = self.levels[f.name]
                names.extend([f"{f.name}={lv[1]}"] if len(lv) == 2 else [f"{f.name}={v}" for v in lv])
        if self.schema.protected_as_feature:
            names.append(self.schema.protected_column)
        return tuple(names)

    def transform(self, frame: pd.DataFrame, protected: np.ndarray | None = None) -> np.ndarray:
        blocks = []
        for f in self.schema.feature_columns:
            if f.kind == "numeric":
                col = frame[f.name].astype(np.float64).to_numpy()
                blocks.append(((col - self.means[f.name]) / self.stds[f.name])[:, None])
            else:
                col = frame[f.name].astype(str).to_numpy()
                lv = self.levels[f.name]
                if len(lv) == 2:
                    blocks.append((col == lv[1]).astype(np.float64)[:, None])
                else:
                    blocks.append((col[:, None] == np.asarray(lv)[None, :]).astype(np.float64))
        if self.schema.protected_as_feature:
            if protected is None:
                raise SchemaError("protected values required when protected_as_feature is set")
            blocks.append(np.asarray(protected, dtype=np.float64)[:, None])
        return np.hstack(blocks) if blocks else np.empty((len(frame), 0))

    def to_dict(self) -> dict[str, Any]:
        return {"schema": self.schema.to_dict(), "means": self.means, "stds": self.stds,
                "levels": self.levels}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Preprocessor":
        return cls(DataSchema.from_dict(d["schema"]), dict(d["means"]), dict(d["stds"]),
                   {k: list(v) for k, v in d["levels"].items()})


@dataclass(frozen=True)
class LoadReport:
    path: str
    rows_read: int
    rows_dropped: int
    encoding_width: int
    preprocessor: Preprocessor = field(repr=False, compare=False)

    def summary(self) -> str:
        return (f"path: {self.path}\nrows read: {self.rows_read}\n"
                f"rows dropped: {self.rows_dropped}\nencoding width: {self.encoding_width}\n")


def _map_binary(values: pd.Series, one_value: str, what: str) -> np.ndarray:
    distinct = set(values.unique().tolist())
    others = distinct - {one_value}
    if len(others) > 1:
        raise DomainError(f"{what} column has more than two values: {sorted(map(str, distinct))}")
    return (values == one_value).to_numpy().astype(np.int64)


def load_csv_with_report(
    path: str | Path, schema: DataSchema, preprocessor: Preprocessor | None = None
) -> tuple[LabeledDataset, LoadReport]:
    """Read a CSV, encode it and return the dataset with its load report.

    When ``preprocessor`` is given its statistics are reused (inference on new
    data); otherwise they are fitted on the rows kept here. Files written by
    :func:`save_csv` carry ``__y``/``__s``/``__row_id`` columns which take
    precedence over the schema's label mapping.
    """
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame = frame.apply(lambda c: c.str.strip())
    missing = [c for c in schema.columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    rows_read = len(frame)

    numeric = [f.name for f in schema.feature_columns if f.kind == "numeric"]
    converted = {c: pd.to_numeric(frame[c], errors="coerce") for c in numeric}
    keep = np.ones(rows_read, dtype=bool)
    for c in numeric:
        keep &= np.isfinite(converted[c].to_numpy(dtype=np.float64))
    if ROW_ID_COLUMN not in frame.columns:
        frame[ROW_ID_COLUMN] = np.arange(rows_read)
    encoded = frame.copy()
    for c in numeric:
        encoded[c] = converted[c]
    frame = frame.loc[keep].reset_index(drop=True)
    encoded = encoded.loc[keep].reset_index(drop=True)
    if len(frame) == 0:
        raise DomainError(f"{path}: no usable rows")

    if LABEL_COLUMN in frame.columns:
        y = frame[LABEL_COLUMN].astype(np.int64).to_numpy()
    else:
        y = _map_binary(frame[schema.target_column], schema.positive_label, "target")
    if PROTECTED_COLUMN in frame.columns:
        s = frame[PROTECTED_COLUMN].astype(np.int64).to_numpy()
    else:
        s = _map_binary(frame[schema.protected_column], schema.protected_one_value, "protected")
    row_ids = frame[ROW_ID_COLUMN].astype(np.int64).to_numpy()

    pre = preprocessor if preprocessor is not None else Preprocessor.fit(encoded, schema)
    X = pre.transform(encoded, s)
    source = frame.drop(columns=[c for c in _RESERVED if c in frame.columns])
    ds = LabeledDataset(X, y, s, row_ids, pre.feature_names, source)
    report = LoadReport(str(path), rows_read, int(rows_read - keep.sum()), X.shape[1], pre)
    if report.rows_dropped:
        logger.info("%s: dropped %d rows with missing numeric values", path, report.rows_dropped)
    return ds, report


def load_csv(path: str | Path, schema: DataSchema,
             preprocessor: Preprocessor | None = None) -> LabeledDataset:
    return load_csv_with_report(path, schema, preprocessor)[0]


def save_csv(ds: LabeledDataset, path: str | Path) -> None:
    """Write the dataset with ``__y``, ``__s`` and ``__row_id`` appended."""
    if ds.source is not None:
        out = ds.source.copy()
    else:
        out = pd.DataFrame(ds.features, columns=list(ds.feature_names))
    out[LABEL_COLUMN] = ds.labels
    out[PROTECTED_COLUMN] = ds.protected
    out[ROW_ID_COLUMN] = ds.row_ids
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=False, lineterminator="\n")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.34, 0.33, 0.33)
    seed: int = 0

    def __post_init__(self):
        ratios = tuple(float(r) for r in self.ratios)
        if len(ratios) != 3 or any(r <= 0 for r in ratios):
            raise SpecError("split ratios must be three positive fractions")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise SpecError(f"split ratios sum to {sum(ratios)!r}, not 1")
        object.__setattr__(self, "ratios", ratios)


def split(ds: LabeledDataset, spec: SplitSpec = SplitSpec()
          ) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded shuffled train/validation/test partition.

    Validation and test get ``floor(ratio * N)`` rows; the remainder goes to train.
    """
    n = len(ds)
    if n < 3:
        raise DomainError("need at least three rows to split")
    n_val = floor_count(spec.ratios[1], n)
    n_test = floor_count(spec.ratios[2], n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise DomainError(f"{n} rows leave an empty partition under ratios {spec.ratios}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(ds.subset(np.sort(p)) for p in parts)  # type: ignore[return-value]


@dataclass(frozen=True)
class BiasSpec:
    """Informed label flipping request.

    ``scorer_config`` is the MLP used to rank candidates (``None`` means the
    model defaults); the ranking model trains for at most ``scorer_epochs``.
    """

    group: int = 0
    rate: float = 0.5
    scorer_config: Any = None
    seed: int = 0
    scorer_epochs: int = 100

    def __post_init__(self):
        if self.group not in (0, 1):
            raise SpecError("bias group must be 0 or 1")
        if not 0.0 <= self.rate <= 1.0:
            raise SpecError(f"bias rate {self.rate} outside [0, 1]")
        if self.scorer_epochs < 2:
            raise SpecError("scorer_epochs must be at least 2")


@dataclass(frozen=True)
class BiasReport:
    group: int
    rate: float
    n_candidates: int
    flipped_row_ids: np.ndarray
    table_before: np.ndarray
    table_after: np.ndarray

    @property
    def n_flipped(self) -> int:
        return len(self.flipped_row_ids)

    def summary(self) -> str:
        lines = [f"group: {self.group}", f"rate: {self.rate}",
                 f"candidates: {self.n_candidates}", f"flipped: {self.n_flipped}"]
        for name, t in (("before", self.table_before), ("after", self.table_after)):
            for s in (0, 1):
                lines.append(f"{name} s={s}: y=0 {t[s, 0]:.4f} y=1 {t[s, 1]:.4f}")
            lines.append(f"{name} class balance: y=0 {t[:, 0].sum():.4f} y=1 {t[:, 1].sum():.4f}")
        return "\n".join(lines) + "\n"


def flip_labels(ds: LabeledDataset, scores: np.ndarray, group: int, rate: float
                ) -> tuple[LabeledDataset, BiasReport]:
    """Flip the ``ceil(rate * |D0|)`` highest-scored negatives of ``group`` to 1.

    ``D0`` is the set of rows with ``s == group`` and ``y == 0``; ties in the
    score are broken by ascending row id.
    """
    if not 0.0 <= rate <= 1.0:
        raise SpecError(f"bias rate {rate} outside [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(ds),):
        raise DomainError("one ranking score per row is required")
    cand = np.flatnonzero((ds.protected == group) & (ds.labels == 0))
    if len(cand) == 0:
        raise DomainError(f"no rows with s={group} and y=0 to flip")
    order = np.lexsort((ds.row_ids[cand], -scores[cand]))
    chosen = cand[order[: ceil_count(rate, len(cand))]]
    labels = ds.labels.copy()
    labels[chosen] = 1
    out = ds.with_labels(labels)
    report = BiasReport(group, rate, len(cand), np.sort(ds.row_ids[chosen]),
                        group_label_table(ds), group_label_table(out))
    return out, report


def ranking_scores(ds: LabeledDataset, spec: BiasSpec) -> np.ndarray:
    """Scores of an unpenalized MLP fitted to the whole of ``ds``.

    There is no held-out set here, so early stopping watches the in-sample loss.
    """
    from .model import MlpConfig
    from .training import TrainConfig, predict, train

    cfg = spec.scorer_config if spec.scorer_config is not None else MlpConfig(init_seed=spec.seed)
    tcfg = TrainConfig(
        lam=0.0, shuffle_seed=spec.seed, max_epochs=spec.scorer_epochs,
        warmup_epochs=min(15, spec.scorer_epochs - 1), record_penalty_at_zero_lambda=False,
    )
    model, _ = train(ds, ds, cfg, tcfg)
    return predict(model, ds).scores


def inject_bias(ds: LabeledDataset, spec: BiasSpec,
                scores: np.ndarray | None = None) -> LabeledDataset:
    """Informed label flipping; ``scores`` skips training the ranking model."""
    if not np.any((ds.protected == spec.group) & (ds.labels == 0)):
        raise DomainError(f"no rows with s={spec.group} and y=0 to flip")
    if scores is None:
        scores = ranking_scores(ds, spec)
    return flip_labels(ds, scores, spec.group, spec.rate)[0]


def group_label_table(ds: LabeledDataset) -> np.ndarray:
    """2x2 proportions indexed ``[s, y]``."""
    table = np.zeros((2, 2))
    np.add.at(table, (ds.protected, ds.labels), 1.0)
    return table / len(ds)
