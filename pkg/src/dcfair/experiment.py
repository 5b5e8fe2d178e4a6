"""Grid search, lambda sweeps, Pareto fronts and result files."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, ExperimentError
from .losses import FairnessMode, calibrate_k_pct
from .metrics import GridSpec, evaluate, export_curves
from .model import STANDARD_GRID, MlpConfig
from .training import TrainConfig, TrainedModel, baseline_config, predict, train

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(round(0.05 * i, 2) for i in range(20))
FAIRNESS_METRICS = ("abpc_tau", "abcc_tau")


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> Iterable:
    """Yield ``fn(item)`` in input order, using a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        for item in items:
            yield fn(item)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(fn, items)


@dataclass(frozen=True)
class SearchSpace:
    hidden_layers: tuple[int, ...] = STANDARD_GRID["hidden_layers"]
    hidden_size: tuple[int, ...] = STANDARD_GRID["hidden_size"]
    dropout_prob: tuple[float, ...] = STANDARD_GRID["dropout_prob"]
    l2_weight: tuple[float, ...] = STANDARD_GRID["l2_weight"]
    learning_rate: float = 0.01
    init_seed: int = 0

    def configs(self) -> list[MlpConfig]:
        return [MlpConfig(layers, size, drop, l2, self.learning_rate, self.init_seed)
                for layers, size, drop, l2 in itertools.product(
                    self.hidden_layers, self.hidden_size, self.dropout_prob, self.l2_weight)]


@dataclass(frozen=True)
class TuneEntry:
    rank_key: int
    config: MlpConfig
    val_loss: float
    n_params: int
    epochs: int
    status: str


@dataclass
class TuneResult:
    best: MlpConfig
    leaderboard: list[TuneEntry]

    def to_csv(self, path: str | Path) -> None:
        names = ["grid_index", "hidden_layers", "hidden_size", "dropout_prob", "l2_weight",
                 "learning_rate", "init_seed", "n_params", "epochs", "val_loss", "status"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for e in self.leaderboard:
                c = e.config
                w.writerow([e.rank_key, c.hidden_layers, c.hidden_size, c.dropout_prob,
                            c.l2_weight, c.learning_rate, c.init_seed, e.n_params, e.epochs,
                            repr(e.val_loss), e.status])


def _tune_one(args) -> TuneEntry:
    index, config, train_ds, val_ds, tcfg = args
    n_params = config.n_params(train_ds.n_features)
    try:
        _, history = train(train_ds, val_ds, config, tcfg)
    except Exception as exc:  # a diverged or invalid grid point is recorded, not fatal
        return TuneEntry(index, config, math.inf, n_params, 0, f"failed: {exc}")
    return TuneEntry(index, config, history.best.val_loss, n_params, len(history), "ok")


def grid_search(train_ds: LabeledDataset, val_ds: LabeledDataset,
                space: SearchSpace | Sequence[MlpConfig], train_config: TrainConfig = TrainConfig(),
                jobs: int = 1) -> TuneResult:
    """Fit one unpenalized model per grid point; lowest validation loss wins.

    Ties go to the smaller parameter count, then to the earlier grid point.
    """
    configs = space.configs() if isinstance(space, SearchSpace) else list(space)
    if not configs:
        raise ConfigError("empty search grid")
    tcfg = replace(train_config, lam=0.0, mode=FairnessMode.none(),
                   record_penalty_at_zero_lambda=False)
    work = [(i, c, train_ds, val_ds, tcfg) for i, c in enumerate(configs)]
    board = list(_parallel_map(_tune_one, work, jobs))
    ok = [e for e in board if e.status == "ok"]
    if not ok:
        raise ExperimentError("every grid-search run failed")
    best = min(ok, key=lambda e: (e.val_loss, e.n_params, e.rank_key))
    return TuneResult(best.config, board)


@dataclass(frozen=True)
class SweepSpec:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    modes: tuple[str, ...] = ("global", "decision_centric")
    tau: float = 0.7
    seeds: tuple[int, ...] = (0,)
    dataset: str = ""
    bias_rate: float | None = None
    mlp_config: MlpConfig = MlpConfig()
    train_config: TrainConfig = TrainConfig()
    grid: GridSpec = GridSpec()

    def __post_init__(self):
        lams = tuple(float(x) for x in self.lambdas)
        object.__setattr__(self, "lambdas", lams)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        modes = tuple(FairnessMode.parse(m).kind for m in self.modes)
        object.__setattr__(self, "modes", modes)
        if not lams or lams[0] != 0.0:
            raise ConfigError("the lambda grid must start with the 0 baseline")
        if any(b <= a for a, b in zip(lams, lams[1:])) or lams[-1] >= 1.0:
            raise ConfigError("lambda values must be strictly increasing and below 1")
        if not modes or not set(modes) <= {"global", "decision_centric"}:
            raise ConfigError("modes must be a nonempty subset of global / decision_centric")
        if len(set(modes)) != len(modes) or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("duplicate modes or seeds")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau {self.tau} outside [0, 1)")

    def cells(self) -> list[tuple[str, float, int]]:
        return [(m, lam, s) for s in self.seeds for m in self.modes for lam in self.lambdas]


RECORD_COLUMNS = ("dataset", "bias_rate", "tau", "mode", "lambda", "seed", "k_pct",
                  "auc_pr_tau", "abpc_tau", "abcc_tau", "epochs", "wall_s", "status")


@dataclass(frozen=True)
class RunRecord:
    dataset: str
    bias_rate: float | None
    tau: float
    mode: str
    lam: float
    seed: int
    k_pct: float | None
    auc_pr_tau: float
    abpc_tau: float
    abcc_tau: float
    epochs: int
    wall_s: float
    status: str = "ok"

    @property
    def key(self) -> tuple[str, float, int]:
        return (self.mode, self.lam, self.seed)

    @property
    def baseline(self) -> bool:
        return self.lam == 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def run_key(self) -> str:
        return run_key(self.mode, self.lam, self.seed)

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else str(v)
        return [fmt(getattr(self, f.name)) for f in fields(self)]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "RunRecord":
        def opt(v):
            return None if v == "" else float(v)
        return cls(row["dataset"], opt(row["bias_rate"]), float(row["tau"]), row["mode"],
                   float(row["lambda"]), int(row["seed"]), opt(row["k_pct"]),
                   float(row["auc_pr_tau"]), float(row["abpc_tau"]), float(row["abcc_tau"]),
                   int(row["epochs"]), float(row["wall_s"]), row["status"])

    def same_result(self, other: "RunRecord") -> bool:
        """Equality ignoring wall-clock time."""
        return replace(self, wall_s=0.0) == replace(other, wall_s=0.0)


def run_key(mode: str, lam: float, seed: int) -> str:
    return f"{mode}__lam{lam:.4f}__seed{seed}"


@dataclass(frozen=True)
class _Cell:
    mode: str
    lam: float
    seed: int
    k_pct: float | None


def _seeded(spec: SweepSpec, seed: int) -> tuple[MlpConfig, TrainConfig]:
    mlp = replace(spec.mlp_config, init_seed=seed)
    tcfg = replace(spec.train_config, tau=spec.tau, shuffle_seed=seed)
    return mlp, tcfg


def _record(spec, cell: _Cell, model: TrainedModel, epochs: int, wall: float, test_ds,
            curve_dir: Path | None) -> RunRecord:
    scores = predict(model, test_ds)
    rep = evaluate(scores, spec.tau, spec.grid)
    if curve_dir is not None:
        export_curves(scores, spec.tau, curve_dir / run_key(cell.mode, cell.lam, cell.seed),
                      spec.grid)
    return RunRecord(spec.dataset, spec.bias_rate, spec.tau, cell.mode, cell.lam, cell.seed,
                     cell.k_pct, rep.auc_pr_tau, rep.abpc_tau, rep.abcc_tau, epochs, wall)


def _failed(spec, cell: _Cell, wall: float, exc: BaseException) -> RunRecord:
    return RunRecord(spec.dataset, spec.bias_rate, spec.tau, cell.mode, cell.lam, cell.seed,
                     cell.k_pct, math.nan, math.nan, math.nan, 0, wall,
                     f"failed: {type(exc).__name__}: {exc}".replace("\n", " "))


def _run_cell(args) -> RunRecord:
    spec, cell, train_ds, val_ds, test_ds, out_dir = args
    mlp, tcfg = _seeded(spec, cell.seed)
    mode = FairnessMode(cell.mode, cell.k_pct)
    start = time.perf_counter()
    try:
        model, history = train(train_ds, val_ds, mlp, replace(tcfg, lam=cell.lam, mode=mode))
        if out_dir is not None:
            history.to_csv(out_dir / "histories" / f"{run_key(cell.mode, cell.lam, cell.seed)}.csv")
        curve_dir = None if out_dir is None else out_dir / "curves"
        return _record(spec, cell, model, len(history), time.perf_counter() - start, test_ds,
                       curve_dir)
    except Exception as exc:
        return _failed(spec, cell, time.perf_counter() - start, exc)


class Journal:
    """Append-only CSV of finished cells, used to resume an interrupted sweep."""

    def __init__(self, path: Path):
        self.path = path

    def read(self) -> list[RunRecord]:
        if not self.path.exists():
            return []
        with open(self.path, newline="") as fh:
            return [RunRecord.from_row(r) for r in csv.DictReader(fh)]

    def append(self, record: RunRecord) -> None:
        fresh = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if fresh:
                w.writerow(RECORD_COLUMNS)
            w.writerow(record.row())
            fh.flush()
            os.fsync(fh.fileno())


def sweep(spec: SweepSpec, train_ds: LabeledDataset, val_ds: LabeledDataset,
          test_ds: LabeledDataset, out_dir: str | Path | None = None, jobs: int = 1,
          resume: bool = False) -> list[RunRecord]:
    """Train and evaluate every (mode, lambda, seed) cell.

    Each seed trains one lambda=0 baseline that serves as the 0 cell of every
    mode and calibrates k_pct for the decision-centric cells. With ``out_dir``
    finished cells are journaled; ``resume`` skips cells already journaled as
    ok. Failed cells come back with a ``failed: ...`` status.
    """
    out = Path(out_dir) if out_dir is not None else None
    journal = None
    done: dict[tuple, RunRecord] = {}
    if out is not None:
        for sub in ("curves", "histories"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        journal = Journal(out / "journal.csv")
        if resume:
            for rec in journal.read():
                if (rec.dataset, rec.tau, rec.bias_rate) != (spec.dataset, spec.tau, spec.bias_rate):
                    raise ExperimentError(f"{journal.path} belongs to a different sweep")
                if rec.ok:
                    done[rec.key] = rec
        elif journal.path.exists():
            journal.path.unlink()

    def finish(rec: RunRecord) -> None:
        done[rec.key] = rec
        if journal is not None:
            journal.append(rec)
        log.info("%s lambda=%.2f seed=%d: %s", rec.mode, rec.lam, rec.seed, rec.status)

    pending: list[_Cell] = []
    for seed in spec.seeds:
        base_keys = [(m, 0.0, seed) for m in spec.modes]
        k_pct = None
        dc_base = done.get(("decision_centric", 0.0, seed))
        if dc_base is not None:
            k_pct = dc_base.k_pct
        if any(k not in done for k in base_keys):
            for rec in _run_baseline(spec, seed, train_ds, val_ds, test_ds, out):
                if rec.key in done:
                    continue
                finish(rec)
                if rec.mode == "decision_centric":
                    k_pct = rec.k_pct
        for mode in spec.modes:
            for lam in spec.lambdas[1:]:
                if (mode, lam, seed) in done:
                    continue
                if mode == "decision_centric" and k_pct is None:
                    rec = _failed(spec, _Cell(mode, lam, seed, None), 0.0,
                                  ExperimentError("baseline failed, k_pct unavailable"))
                    finish(rec)
                    continue
                pending.append(_Cell(mode, lam, seed, k_pct if mode == "decision_centric" else None))

    work = [(spec, c, train_ds, val_ds, test_ds, out) for c in pending]
    for rec in _parallel_map(_run_cell, work, jobs):
        finish(rec)
    records = sorted(done.values(), key=_sort_key)
    return records


def _sort_key(r: RunRecord):
    return (r.seed, r.mode, r.lam)


def _run_baseline(spec, seed, train_ds, val_ds, test_ds, out) -> list[RunRecord]:
    mlp, tcfg = _seeded(spec, seed)
    start = time.perf_counter()
    cells = [_Cell(m, 0.0, seed, None) for m in spec.modes]
    try:
        model, history = train(train_ds, val_ds, mlp, baseline_config(tcfg))
        wall = time.perf_counter() - start
        if out is not None:
            history.to_csv(out / "histories" / f"baseline__seed{seed}.csv")
        k_pct = calibrate_k_pct(predict(model, val_ds), spec.tau, tcfg.k_min)
        first = _record(spec, cells[0], model, len(history), wall, test_ds,
                        None if out is None else out / "curves")
    except Exception as exc:
        wall = time.perf_counter() - start
        return [_failed(spec, c, wall, exc) for c in cells]
    out_records = []
    for c in cells:
        rec = replace(first, mode=c.mode, k_pct=k_pct if c.mode == "decision_centric" else None)
        if out is not None and c.mode != cells[0].mode:
            for suffix in ("pdf_s0", "pdf_s1", "cdf_s0", "cdf_s1", "pr"):
                src = out / "curves" / f"{first.run_key}__{suffix}.csv"
                (out / "curves" / f"{rec.run_key}__{suffix}.csv").write_bytes(src.read_bytes())
        out_records.append(rec)
    return out_records


@dataclass(frozen=True)
class ParetoFront:
    metric: str
    members: tuple[RunRecord, ...]


def _objectives(records: Iterable[RunRecord], metric: str) -> list[RunRecord]:
    if metric not in FAIRNESS_METRICS:
        raise ConfigError(f"unknown fairness metric {metric!r}")
    return [r for r in records if r.ok and np.isfinite(getattr(r, metric))
            and np.isfinite(r.auc_pr_tau)]


def pareto_front(records: Iterable[RunRecord], metric: str = "abcc_tau") -> ParetoFront:
    """Non-dominated records (maximize AUC-PR_tau, minimize ``metric``), fairness ascending.

    Exact duplicates of a front member are all kept.
    """
    pool = sorted(_objectives(records, metric),
                  key=lambda r: (getattr(r, metric), -r.auc_pr_tau, _sort_key(r)))
    front: list[RunRecord] = []
    best_perf = -math.inf
    for r in pool:
        fair = getattr(r, metric)
        if r.auc_pr_tau > best_perf:
            front.append(r)
            best_perf = r.auc_pr_tau
        elif front and (getattr(front[-1], metric), front[-1].auc_pr_tau) == (fair, r.auc_pr_tau):
            front.append(r)
    return ParetoFront(metric, tuple(front))


def pareto_front_bruteforce(records: Iterable[RunRecord], metric: str = "abcc_tau") -> ParetoFront:
    pool = _objectives(records, metric)

    def dominates(a, b):
        fa, fb = getattr(a, metric), getattr(b, metric)
        return (a.auc_pr_tau >= b.auc_pr_tau and fa <= fb
                and (a.auc_pr_tau > b.auc_pr_tau or fa < fb))

    front = [b for b in pool if not any(dominates(a, b) for a in pool)]
    front.sort(key=lambda r: (getattr(r, metric), -r.auc_pr_tau, _sort_key(r)))
    return ParetoFront(metric, tuple(front))


def fronts_by_mode(records: Sequence[RunRecord], metric: str) -> dict[str, ParetoFront]:
    modes = sorted({r.mode for r in records})
    return {m: pareto_front([r for r in records if r.mode == m], metric) for m in modes}


def write_records(records: Iterable[RunRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        return [RunRecord.from_row(r) for r in csv.DictReader(fh)]


@dataclass
class ReportFiles:
    records: Path
    fronts: dict[str, Path] = field(default_factory=dict)
    failures: Path | None = None


def emit_report(records: Sequence[RunRecord], out_dir: str | Path,
                metrics: Sequence[str] = FAIRNESS_METRICS) -> ReportFiles:
    """Write records.csv, one pareto_<metric>.csv per metric (fronts per mode) and failures.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=_sort_key)
    files = ReportFiles(out / "records.csv")
    write_records(ordered, files.records)
    for metric in metrics:
        path = out / f"pareto_{metric}.csv"
        members = [r for front in fronts_by_mode(ordered, metric).values() for r in front.members]
        write_records(members, path)
        files.fronts[metric] = path
    failures = [{"mode": r.mode, "lambda": r.lam, "seed": r.seed, "status": r.status}
                for r in ordered if not r.ok]
    path = out / "failures.json"
    if failures:
        path.write_text(json.dumps(failures, indent=2) + "\n")
        files.failures = path
    elif path.exists():
        path.unlink()
    return files
