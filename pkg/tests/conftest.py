from pathlib import Path

import numpy as np
import pytest
import yaml

from dcfair.data import DataSchema, LabeledDataset
from dcfair.losses import SinkhornConfig

ROOT = Path(__file__).resolve().parent.parent
TIGHT = SinkhornConfig(convergence_tol=1e-13, newton_max_steps=100)
ACCEPTANCE_LINES: list[str] = []


def spread_scores(rng, n, lo=0.05, hi=0.95, gap=2e-3):
    """Scores with pairwise gaps >= gap so small perturbations never reorder them."""
    while True:
        x = rng.uniform(lo, hi, n)
        if np.min(np.diff(np.sort(x))) >= gap:
            return x


def config_schema(name: str, **overrides) -> DataSchema:
    raw = yaml.safe_load((ROOT / "configs" / f"{name}.yaml").read_text())
    return DataSchema.from_dict({**raw["dataset"]["schema"], **overrides})


def synthetic(n=2000, seed=0, k=4, bias=1.5) -> LabeledDataset:
    """Two-group tabular data whose label depends on x and, through ``bias``, on s."""
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 2, n)
    X = rng.normal(size=(n, k))
    X[:, 0] += 0.8 * s
    logit = X @ np.linspace(1.0, -0.5, k) + bias * (s - 0.5)
    y = (rng.uniform(size=n) < 1 / (1 + np.exp(-logit))).astype(int)
    return LabeledDataset(np.column_stack([X, s]), y, s, np.arange(n))


@pytest.fixture(scope="session")
def telco_schema():
    return config_schema("telco")


@pytest.fixture(scope="session")
def adult_schema():
    return config_schema("adult")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
