"""Training objective: BCE plus an optimal-transport unfairness penalty.

The penalty compares the score distributions of the two protected groups,
either in full (global) or restricted to each group's top-k% scores
(decision-centric). Distances are entropic 1-Wasserstein estimates on the
cost ``|a_i - b_j|``; an exact 1-D Wasserstein routine serves as reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ._util import ceil_count
from .errors import ConfigError, DomainError

BCE_CLAMP = 1e-12
DEFAULT_K_MIN = 0.02


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FairnessMode:
    kind: Literal["none", "global", "decision_centric"] = "none"
    k_pct: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "global", "decision_centric"):
            raise ConfigError(f"unknown fairness mode {self.kind!r}")
        if self.kind == "decision_centric" and self.k_pct is not None:
            if not 0.0 < self.k_pct <= 1.0:
                raise ConfigError(f"k_pct {self.k_pct} outside (0, 1]")

    @classmethod
    def none(cls) -> "FairnessMode":
        return cls("none")

    @classmethod
    def global_(cls) -> "FairnessMode":
        return cls("global")

    @classmethod
    def decision_centric(cls, k_pct: float | None = None) -> "FairnessMode":
        return cls("decision_centric", k_pct)

    @classmethod
    def parse(cls, text: str, k_pct: float | None = None) -> "FairnessMode":
        key = text.strip().lower().replace("-", "_")
        if key in ("dc", "decision_centric", "decisioncentric"):
            return cls.decision_centric(k_pct)
        if key in ("global", "none"):
            return cls(key)
        raise ConfigError(f"unknown fairness mode {text!r}")

    @property
    def label(self) -> str:
        return self.kind.replace("_", "-")


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic OT settings.

    Solves with more than ``newton_max_size`` points in total stop at
    ``max_iters`` scaling iterations; smaller unconverged ones are finished
    with up to ``newton_max_steps`` Newton steps on the dual.
    """

    epsilon: float = 0.01
    max_iters: int = 200
    convergence_tol: float = 1e-6
    newton_max_size: int = 400
    newton_max_steps: int = 50

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.convergence_tol < 0:
            raise ConfigError("convergence_tol must be non-negative")


@dataclass(frozen=True)
class SinkhornResult:
    distance: float
    objective: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    converged: bool
    n_iter: int
    marginal_error: float
    newton_steps: int = 0
    plan: np.ndarray | None = field(default=None, repr=False)


def bce(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. each score."""
    p = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise DomainError("bce of an empty batch")
    if p.shape != y.shape:
        raise DomainError("scores and labels differ in shape")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    grad = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n * inside
    return float(loss), grad


def exact_w1(a: np.ndarray, b: np.ndarray) -> float:
    """1-Wasserstein distance between two empirical measures on the line.

    Integrates ``|Q_a(u) - Q_b(u)|`` over u in (0, 1); breakpoints ``i/n`` and
    ``j/m`` are handled in integer units of ``1/(n m)`` so none are lost to
    rounding.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise DomainError("exact_w1 of an empty sample")
    breaks = np.union1d(np.arange(n + 1, dtype=np.int64) * m, np.arange(m + 1, dtype=np.int64) * n)
    lo = breaks[:-1]
    width = np.diff(breaks)
    return float(np.sum(np.abs(a[lo // m] - b[lo // n]) * width) / (n * m))


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return (np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx).squeeze(axis)


def _dual_value(f, g, C, logw, eps, mu, nu) -> tuple[float, np.ndarray]:
    # a rejected line-search trial may overflow to inf, which the caller discards
    with np.errstate(over="ignore"):
        P = np.exp((f[:, None] + g[None, :] - C) / eps + logw)
        return float(f @ mu + g @ nu - eps * (P.sum() - 1.0)), P


def _newton_polish(f, g, C, logw, eps, mu, nu, tol, max_steps):
    """Levenberg-Marquardt damped Newton ascent on the entropic dual (gauge fixed by the last g).

    At small eps the plan is nearly block-sparse and the Hessian nearly
    singular, so the damping grows until a step improves the dual value.
    """
    n = f.size
    value, P = _dual_value(f, g, C, logw, eps, mu, nu)
    damping = 1e-10
    steps = 0
    err = np.inf
    for steps in range(max_steps + 1):
        rows, cols = P.sum(axis=1), P.sum(axis=0)
        r = np.concatenate([mu - rows, nu - cols])
        err = max(np.abs(r[:n]).sum(), np.abs(r[n:]).sum())
        if err < tol or steps == max_steps:
            break
        H = (np.block([[np.diag(rows), P], [P.T, np.diag(cols)]]) / eps)[:-1, :-1]
        scale = float(H.diagonal().max())
        accepted = False
        while damping <= 1e8 and not accepted:
            try:
                d = np.linalg.solve(H + damping * scale * np.eye(H.shape[0]), r[:-1])
            except np.linalg.LinAlgError:
                damping *= 100
                continue
            d = np.append(d, 0.0)
            slope = float(r @ d)
            for t in (1.0, 0.5, 0.25):
                f_new, g_new = f + t * d[:n], g + t * d[n:]
                new_value, P_new = _dual_value(f_new, g_new, C, logw, eps, mu, nu)
                if new_value >= value + 1e-4 * t * slope and new_value > value:
                    accepted = True
                    break
            if not accepted:
                damping *= 100
        if not accepted:
            break
        damping = max(damping / 10, 1e-12)
        f, g, value, P = f_new, g_new, new_value, P_new
    return f, g, steps, err


def sinkhorn_w1(a: np.ndarray, b: np.ndarray, cfg: SinkhornConfig = SinkhornConfig()
                ) -> SinkhornResult:
    """Entropic OT between uniform empirical measures on ``a`` and ``b``.

    The scaling iterations run on a kernel rescaled by dual potentials kept in
    the log domain (they are absorbed whenever the scalings leave [1e-3, 1e3]).
    ``distance`` is ``<P, C>`` for the final plan; ``objective`` is the
    regularized value ``<P, C> + eps * KL(P | mu x nu)``, whose exact gradient
    at convergence is the fixed-plan (envelope) gradient returned here:
    ``dA/da_i = sum_j P_ij sign(a_i - b_j)``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise DomainError("sinkhorn_w1 of an empty sample")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DomainError("non-finite scores")
    eps = cfg.epsilon
    mu = np.full(n, 1.0 / n)
    nu = np.full(m, 1.0 / m)
    logw = np.log(mu)[:, None] + np.log(nu)[None, :]
    C = np.abs(a[:, None] - b[None, :])

    def c_transform_rows(g):
        return -eps * _logsumexp((g[None, :] - C) / eps + np.log(nu)[None, :], axis=1)

    def c_transform_cols(f):
        return -eps * _logsumexp((f[:, None] - C) / eps + np.log(mu)[:, None], axis=0)

    alpha = c_transform_rows(np.zeros(m))
    beta = c_transform_cols(alpha)
    K = np.exp((alpha[:, None] + beta[None, :] - C) / eps)
    u = np.ones(n)
    v = np.ones(m)
    log_thr = np.log(1e3)
    best = (np.inf, alpha, beta, u, v)
    converged = False
    it = 0
    while True:
        Kv = K @ (nu * v)
        err = float(np.abs(u * Kv - 1.0) @ mu)
        if err < best[0]:
            best = (err, alpha.copy(), beta.copy(), u.copy(), v.copy())
        if err < cfg.convergence_tol:
            converged = True
            break
        if it == cfg.max_iters:
            break
        it += 1
        with np.errstate(divide="ignore", over="ignore"):
            u = 1.0 / Kv
            v = 1.0 / (K.T @ (mu * u))
            bad = not (np.isfinite(u).all() and np.isfinite(v).all() and (u > 0).all()
                       and (v > 0).all())
        if bad:
            # a row or column of the kernel underflowed: redo the half steps in the log domain
            g = beta + (eps * np.log(v) if np.isfinite(v).all() and (v > 0).all() else 0.0)
            alpha = c_transform_rows(g)
            beta = c_transform_cols(alpha)
            u, v = np.ones(n), np.ones(m)
            K = np.exp((alpha[:, None] + beta[None, :] - C) / eps)
        elif np.abs(np.log(u)).max() > log_thr or np.abs(np.log(v)).max() > log_thr:
            alpha = alpha + eps * np.log(u)
            beta = beta + eps * np.log(v)
            u, v = np.ones(n), np.ones(m)
            K = np.exp((alpha[:, None] + beta[None, :] - C) / eps)

    err, alpha, beta, u, v = best
    f = alpha + eps * np.log(u)
    g = beta + eps * np.log(v)
    steps = 0
    if not converged and n + m <= cfg.newton_max_size:
        f, g, steps, err = _newton_polish(f, g, C, logw, eps, mu, nu,
                                          cfg.convergence_tol, cfg.newton_max_steps)
        converged = err < cfg.convergence_tol
    objective, P = _dual_value(f, g, C, logw, eps, mu, nu)
    sign = np.sign(a[:, None] - b[None, :])
    return SinkhornResult(
        distance=float(np.sum(P * C)),
        objective=max(objective, 0.0),
        grad_a=(P * sign).sum(axis=1),
        grad_b=-(P * sign).sum(axis=0),
        converged=bool(converged),
        n_iter=it,
        marginal_error=float(err),
        newton_steps=steps,
        plan=P,
    )


def top_fraction_indices(scores: np.ndarray, k_pct: float) -> np.ndarray:
    """Indices of the ``ceil(k_pct * n)`` largest scores, in ascending index order.

    At a tie on the cut the later-indexed element is taken first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise DomainError("top_fraction of an empty sample")
    if not 0.0 < k_pct <= 1.0:
        raise DomainError(f"k_pct {k_pct} outside (0, 1]")
    count = ceil_count(k_pct, n)
    if count >= n:
        return np.arange(n)
    order = np.lexsort((-np.arange(n), -scores))
    return np.sort(order[:count])


def top_fraction(scores: np.ndarray, k_pct: float) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return scores[top_fraction_indices(scores, k_pct)]


def calibrate_k_pct(validation_scores, tau: float, k_min: float = DEFAULT_K_MIN) -> float:
    """Share of validation scores at or above ``tau`` (both groups pooled), clamped to [k_min, 1]."""
    scores = np.asarray(getattr(validation_scores, "scores", validation_scores), dtype=np.float64)
    if scores.size == 0:
        raise DomainError("no validation scores to calibrate on")
    if not 0.0 <= tau < 1.0:
        raise DomainError(f"tau {tau} outside [0, 1)")
    share = float(np.mean(scores >= tau))
    if share < k_min:
        warnings.warn(f"only {share:.4f} of validation scores reach tau={tau}; "
                      f"k_pct clamped to {k_min}", CalibrationWarning, stacklevel=2)
        return float(k_min)
    return min(share, 1.0)


@dataclass(frozen=True)
class CompositeLossValue:
    total: float
    bce_part: float
    unfairness_part: float
    lam: float
    k_effective: tuple[int, int] | None = None
    penalty_skipped: bool = False
    sinkhorn_converged: bool | None = None


def penalty_indices(scores: np.ndarray, protected: np.ndarray, mode: FairnessMode
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Rows of each group that enter the unfairness penalty under ``mode``."""
    idx0 = np.flatnonzero(protected == 0)
    idx1 = np.flatnonzero(protected == 1)
    if mode.kind == "decision_centric":
        if mode.k_pct is None:
            raise ConfigError("decision-centric mode needs a calibrated k_pct")
        idx0 = idx0[top_fraction_indices(scores[idx0], mode.k_pct)] if idx0.size else idx0
        idx1 = idx1[top_fraction_indices(scores[idx1], mode.k_pct)] if idx1.size else idx1
    return idx0, idx1


def composite_loss(scores: np.ndarray, labels: np.ndarray, protected: np.ndarray, lam: float,
                   mode: FairnessMode, cfg: SinkhornConfig = SinkhornConfig()
                   ) -> tuple[CompositeLossValue, np.ndarray]:
    """``(1 - lam) * BCE + lam * penalty`` and its gradient w.r.t. every score.

    With fewer than two selected rows in either group the penalty and its
    gradient are zero and ``penalty_skipped`` is set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    protected = np.asarray(protected)
    if not 0.0 <= lam < 1.0:
        raise ConfigError(f"lambda {lam} outside [0, 1)")
    if scores.shape != protected.shape or scores.shape != np.shape(labels):
        raise DomainError("scores, labels and protected must be aligned")
    bce_part, bce_grad = bce(scores, labels)
    unfairness = 0.0
    ugrad = np.zeros_like(scores)
    k_eff = None
    skipped = False
    converged = None
    if mode.kind != "none":
        sel0, sel1 = penalty_indices(scores, protected, mode)
        if mode.kind == "decision_centric":
            k_eff = (int(sel0.size), int(sel1.size))
        if sel0.size < 2 or sel1.size < 2:
            skipped = True
        else:
            res = sinkhorn_w1(scores[sel0], scores[sel1], cfg)
            unfairness = res.objective
            ugrad[sel0] = res.grad_a
            ugrad[sel1] = res.grad_b
            converged = res.converged
    total = (1.0 - lam) * bce_part + lam * unfairness
    grad = (1.0 - lam) * bce_grad + lam * ugrad
    return CompositeLossValue(total, bce_part, unfairness, lam, k_eff, skipped, converged), grad
