"""YAML experiment configuration.

Top-level keys (paths are relative to the config file):

``name``        dataset label written into result records
``dataset``     ``path`` to the CSV and ``schema`` (see ``DataSchema.from_dict``)
``bias``        optional: ``group``, ``rate`` (number or list; inject-bias writes one file
                per rate, the other commands use the first), ``seed``,
                ``scorer_epochs``, ``scorer`` (MLP settings of the ranking model)
``split``       ``ratios`` and ``seed``
``mlp``         MLP settings (``hidden_layers``, ``hidden_size``, ``dropout_prob``,
                ``l2_weight``, ``learning_rate``, ``init_seed``)
``tune``        optional grid: lists under ``hidden_layers``, ``hidden_size``,
                ``dropout_prob``, ``l2_weight``; scalars ``learning_rate``, ``init_seed``
``train``       ``TrainConfig`` fields; ``sinkhorn`` holds ``SinkhornConfig`` fields
``sweep``       ``tau``, ``lambdas``, ``modes``, ``seeds``, ``jobs``
``out``         output directory
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .data import BiasSpec, DataSchema, SplitSpec
from .errors import ConfigError
from .experiment import DEFAULT_LAMBDAS, SearchSpace, SweepSpec
from .losses import FairnessMode
from .model import MlpConfig
from .training import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset_path: Path
    schema: DataSchema
    split: SplitSpec = SplitSpec()
    bias_rates: tuple[float, ...] = ()
    bias: BiasSpec | None = None
    mlp: MlpConfig = MlpConfig()
    search: SearchSpace = SearchSpace()
    train: TrainConfig = TrainConfig()
    tau: float = 0.7
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    modes: tuple[str, ...] = ("global", "decision_centric")
    seeds: tuple[int, ...] = (0,)
    jobs: int = 1
    out: Path = Path("runs")
    raw: dict[str, Any] = field(default_factory=dict, repr=False, compare=False)

    def with_overrides(self, tau: float | None = None, lam: float | None = None,
                       mode: str | None = None, seed: int | None = None,
                       jobs: int | None = None, out: str | Path | None = None
                       ) -> "ExperimentConfig":
        cfg = self
        if tau is not None:
            if not 0.0 <= tau < 1.0:
                raise ConfigError(f"tau {tau} outside [0, 1)")
            cfg = replace(cfg, tau=float(tau), train=replace(cfg.train, tau=float(tau)))
        if lam is not None:
            cfg = replace(cfg, train=replace(cfg.train, lam=float(lam)))
        if mode is not None:
            parsed = FairnessMode.parse(mode)
            cfg = replace(cfg, train=replace(cfg.train, mode=parsed),
                          modes=(parsed.kind,) if parsed.kind != "none" else cfg.modes)
        if seed is not None:
            cfg = replace(cfg, seeds=(int(seed),))
        if jobs is not None:
            if jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            cfg = replace(cfg, jobs=int(jobs))
        if out is not None:
            cfg = replace(cfg, out=Path(out))
        return cfg

    def sweep_spec(self, bias_rate: float | None = None) -> SweepSpec:
        return SweepSpec(lambdas=self.lambdas, modes=self.modes, tau=self.tau, seeds=self.seeds,
                         dataset=self.name, bias_rate=bias_rate, mlp_config=self.mlp,
                         train_config=self.train)


_TOP_KEYS = {"name", "dataset", "bias", "split", "mlp", "tune", "train", "sweep", "out"}


def _as_tuple(v) -> tuple:
    return tuple(v) if isinstance(v, (list, tuple)) else (v,)


def parse_config(raw: dict[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a config mapping; raises ConfigError before any compute starts."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        ds = raw["dataset"]
        path = (base_dir / ds["path"]).resolve()
        schema = DataSchema.from_dict(ds["schema"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"dataset section incomplete: {exc}") from exc
    if not path.exists():
        raise ConfigError(f"dataset file {path} does not exist")
    try:
        split_raw = raw.get("split") or {}
        split = SplitSpec(tuple(split_raw.get("ratios", SplitSpec().ratios)),
                          int(split_raw.get("seed", 0)))
        bias, rates = None, ()
        if raw.get("bias"):
            b = dict(raw["bias"])
            rates = tuple(float(r) for r in _as_tuple(b.get("rate", 0.5)))
            scorer = MlpConfig.from_dict(b["scorer"]) if b.get("scorer") else None
            bias = BiasSpec(int(b.get("group", 0)), rates[0], scorer, int(b.get("seed", 0)),
                            int(b.get("scorer_epochs", 100)))
        mlp = MlpConfig.from_dict(raw.get("mlp") or {})
        tune = dict(raw.get("tune") or {})
        grid = {k: tuple(_as_tuple(tune.pop(k))) for k in
                ("hidden_layers", "hidden_size", "dropout_prob", "l2_weight") if k in tune}
        search = SearchSpace(**grid, learning_rate=float(tune.pop("learning_rate",
                                                                   mlp.learning_rate)),
                             init_seed=int(tune.pop("init_seed", 0)))
        if tune:
            raise ConfigError(f"unknown tune keys {sorted(tune)}")
        sweep = dict(raw.get("sweep") or {})
        tau = float(sweep.get("tau", (raw.get("train") or {}).get("tau", 0.7)))
        train = TrainConfig.from_dict({**(raw.get("train") or {}), "tau": tau})
        cfg = ExperimentConfig(
            name=str(raw.get("name", path.stem)),
            dataset_path=path,
            schema=schema,
            split=split,
            bias_rates=rates,
            bias=bias,
            mlp=mlp,
            search=search,
            train=train,
            tau=tau,
            lambdas=tuple(float(x) for x in sweep.get("lambdas", DEFAULT_LAMBDAS)),
            modes=tuple(_as_tuple(sweep.get("modes", ("global", "decision_centric")))),
            seeds=tuple(int(s) for s in _as_tuple(sweep.get("seeds", 0))),
            jobs=int(sweep.get("jobs", 1)),
            out=(base_dir / raw.get("out", "runs")).resolve(),
            raw=raw,
        )
        cfg.sweep_spec()  # validates the sweep section
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    return parse_config(raw, path.parent)
