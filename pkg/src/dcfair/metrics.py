"""Decision-centric evaluation metrics.

Fairness: ABPC_tau and ABCC_tau integrate the absolute difference between the
two groups' score densities (resp. CDFs) over the decision region [tau, 1].
With tau = 0 they are the usual ABPC and ABCC. Performance: AUC-PR_tau is the
area under the part of the precision-recall curve traced by thresholds >= tau.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ShapeError

SILVERMAN_FLOOR = 1e-3


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray
    protected: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels).astype(np.int8)
        protected = np.asarray(self.protected).astype(np.int8)
        if scores.ndim != 1 or scores.shape != labels.shape or scores.shape != protected.shape:
            raise ShapeError("scores, labels and protected must be aligned 1-D arrays")
        if not np.all((scores >= 0.0) & (scores <= 1.0)):
            raise DomainError("scores must lie in [0, 1]")
        if not (np.isin(labels, (0, 1)).all() and np.isin(protected, (0, 1)).all()):
            raise DomainError("labels and protected must be binary")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "protected", protected)

    def __len__(self) -> int:
        return self.scores.size

    def groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Scores of group s=0 and s=1; both must be nonempty."""
        g0 = self.scores[self.protected == 0]
        g1 = self.scores[self.protected == 1]
        if g0.size == 0 or g1.size == 0:
            raise DomainError("both protected groups must be nonempty")
        return g0, g1

    @classmethod
    def from_groups(cls, group0, group1, labels=None) -> "ScoreSet":
        g0 = np.asarray(group0, dtype=np.float64)
        g1 = np.asarray(group1, dtype=np.float64)
        scores = np.concatenate([g0, g1])
        protected = np.concatenate([np.zeros(g0.size, np.int8), np.ones(g1.size, np.int8)])
        if labels is None:
            labels = np.zeros(scores.size, np.int8)
        return cls(scores, labels, protected)


@dataclass(frozen=True)
class GridSpec:
    points: int = 1001
    kde_bandwidth: str | float = "silverman"

    def __post_init__(self):
        if self.points < 101:
            raise DomainError("grid needs at least 101 points")
        if self.kde_bandwidth != "silverman":
            if isinstance(self.kde_bandwidth, str) or not float(self.kde_bandwidth) > 0:
                raise DomainError(f"bad bandwidth {self.kde_bandwidth!r}")

    def xs(self, tau: float | None = None) -> np.ndarray:
        """Uniform grid on [0, 1], with ``tau`` inserted if given."""
        x = np.linspace(0.0, 1.0, self.points)
        if tau is not None and tau not in x:
            x = np.sort(np.append(x, tau))
        return x


def _check_tau(tau: float) -> None:
    if not 0.0 <= tau < 1.0:
        raise DomainError(f"tau {tau} outside [0, 1)")


def _nonempty(sample) -> np.ndarray:
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("empty sample")
    return x


class Ecdf:
    """Right-continuous empirical CDF ``F(x) = #{sample <= x} / n``."""

    def __init__(self, sample):
        self.sorted = np.sort(_nonempty(sample))
        self.n = self.sorted.size

    @property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.sorted)

    def __call__(self, x) -> np.ndarray | float:
        out = np.searchsorted(self.sorted, x, side="right") / self.n
        return float(out) if np.ndim(out) == 0 else out


def ecdf(sample) -> Ecdf:
    return Ecdf(sample)


def silverman_bandwidth(sample) -> float:
    x = _nonempty(sample)
    n = x.size
    sigma = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sigma, iqr / 1.34) if iqr > 0 else sigma
    return max(0.9 * spread * n ** (-0.2), SILVERMAN_FLOOR)


def kde_pdf(sample, grid: GridSpec = GridSpec(), x: np.ndarray | None = None,
            normalize: bool = True) -> np.ndarray:
    """Gaussian KDE evaluated at ``x`` (default: the grid points).

    With ``normalize`` the values are rescaled so their trapezoid integral
    over ``x`` (which should span [0, 1]) is one, returning the mass that
    the kernels spill past the boundaries.
    """
    s = _nonempty(sample)
    h = silverman_bandwidth(s) if grid.kde_bandwidth == "silverman" else float(grid.kde_bandwidth)
    x = grid.xs() if x is None else np.asarray(x, dtype=np.float64)
    dens = np.zeros_like(x)
    for start in range(0, s.size, 2048):
        z = (x[:, None] - s[None, start:start + 2048]) / h
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    dens /= s.size * h * np.sqrt(2.0 * np.pi)
    if normalize:
        dens /= np.trapezoid(dens, x)
    return dens


def abpc_tau(scores: ScoreSet, tau: float = 0.0, grid: GridSpec = GridSpec()) -> float:
    _check_tau(tau)
    g0, g1 = scores.groups()
    x = grid.xs(tau)
    gap = np.abs(kde_pdf(g0, grid, x) - kde_pdf(g1, grid, x))
    keep = x >= tau
    return float(np.trapezoid(gap[keep], x[keep]))


def abcc_tau(scores: ScoreSet, tau: float = 0.0) -> float:
    """Exact integral of ``|F0 - F1|`` over [tau, 1] (the integrand is piecewise constant)."""
    _check_tau(tau)
    g0, g1 = scores.groups()
    return _abcc_exact(g0, g1, tau)


def _abcc_exact(g0: np.ndarray, g1: np.ndarray, tau: float) -> float:
    f0, f1 = Ecdf(g0), Ecdf(g1)
    pts = np.concatenate([f0.sorted, f1.sorted, [tau, 1.0]])
    pts = np.unique(pts[(pts >= tau) & (pts <= 1.0)])
    left = pts[:-1]
    return float(np.sum(np.abs(f0(left) - f1(left)) * np.diff(pts)))


@dataclass(frozen=True)
class PartialPrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def area(self) -> float:
        # exactly rounded, so a shorter curve (larger tau) never gets a larger area
        return math.fsum(np.diff(self.recall, prepend=0.0) * self.precision)


def partial_pr_curve(scores: ScoreSet, tau: float = 0.0) -> PartialPrCurve:
    """PR points at each distinct score >= tau (descending) plus the anchor at tau.

    Empty when no score reaches tau.
    """
    _check_tau(tau)
    n_pos = int(scores.labels.sum())
    if n_pos == 0:
        raise DomainError("no positive labels")
    order = np.argsort(-scores.scores, kind="stable")
    s = scores.scores[order]
    y = scores.labels[order].astype(np.int64)
    n_above = int(np.sum(s >= tau))
    if n_above == 0:
        empty = np.empty(0)
        return PartialPrCurve(empty, empty, empty)
    s, y = s[:n_above], y[:n_above]
    tp = np.cumsum(y)
    # last position of each run of equal scores
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    thresholds = s[last]
    precision = tp[last] / (last + 1.0)
    recall = tp[last] / n_pos
    if thresholds[-1] > tau:
        thresholds = np.append(thresholds, tau)
        precision = np.append(precision, precision[-1])
        recall = np.append(recall, recall[-1])
    return PartialPrCurve(thresholds, precision, recall)


def auc_pr_tau(scores: ScoreSet, tau: float = 0.0) -> float:
    return partial_pr_curve(scores, tau).area()


@dataclass(frozen=True)
class MetricReport:
    tau: float
    auc_pr_tau: float
    abpc_tau: float
    abcc_tau: float
    n_group0: int
    n_group1: int
    share_above_tau: float

    def to_kv(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in asdict(self).items())

    @classmethod
    def from_kv(cls, text: str) -> "MetricReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        ints = {"n_group0", "n_group1"}
        return cls(**{k: int(v) if k in ints else float(v) for k, v in kv.items()})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_kv())


def evaluate(scores: ScoreSet, tau: float = 0.0, grid: GridSpec = GridSpec()) -> MetricReport:
    g0, g1 = scores.groups()
    return MetricReport(
        tau=float(tau),
        auc_pr_tau=auc_pr_tau(scores, tau),
        abpc_tau=abpc_tau(scores, tau, grid),
        abcc_tau=abcc_tau(scores, tau),
        n_group0=int(g0.size),
        n_group1=int(g1.size),
        share_above_tau=float(np.mean(scores.scores >= tau)),
    )


def _write_columns(path: Path, header: str, *cols: np.ndarray) -> None:
    rows = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def export_curves(scores: ScoreSet, tau: float, prefix: str | Path,
                  grid: GridSpec = GridSpec()) -> list[Path]:
    """Write ``<prefix>__pdf_s{0,1}.csv``, ``__cdf_s{0,1}.csv`` and ``__pr.csv``."""
    prefix = Path(prefix)
    x = grid.xs()
    written = []
    for s, sample in enumerate(scores.groups()):
        pdf_path = prefix.with_name(f"{prefix.name}__pdf_s{s}.csv")
        _write_columns(pdf_path, "x,density", x, kde_pdf(sample, grid, x))
        cdf_path = prefix.with_name(f"{prefix.name}__cdf_s{s}.csv")
        _write_columns(cdf_path, "x,cdf", x, Ecdf(sample)(x))
        written += [pdf_path, cdf_path]
    curve = partial_pr_curve(scores, tau)
    pr_path = prefix.with_name(f"{prefix.name}__pr.csv")
    _write_columns(pr_path, "threshold,precision,recall", curve.thresholds, curve.precision,
                   curve.recall)
    written.append(pr_path)
    return written
