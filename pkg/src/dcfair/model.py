"""Fully connected ReLU network with a sigmoid output, trained by hand-written backprop + Adam.

All arithmetic is float64. L2 regularization covers weights, not biases.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, StateError

logger = logging.getLogger(__name__)

# Hyperparameter search space of the published protocol.
STANDARD_GRID: dict[str, tuple] = {
    "hidden_layers": (2, 3, 4),
    "hidden_size": (16, 32, 64, 128),
    "dropout_prob": (0.0, 0.01, 0.1),
    "l2_weight": (0.0, 0.01, 0.05),
}

# sigmoid(35) = 1 - 6e-16, so clipped logits keep scores strictly inside (0, 1)
LOGIT_CLIP = 35.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FORMAT = "dcfair-mlp/1"


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: int = 2
    hidden_size: int = 64
    dropout_prob: float = 0.0
    l2_weight: float = 0.0
    learning_rate: float = 0.01
    init_seed: int = 0

    def __post_init__(self):
        if int(self.hidden_layers) < 1 or int(self.hidden_size) < 1:
            raise ConfigError("need at least one hidden layer of at least one unit")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError(f"dropout_prob {self.dropout_prob} outside [0, 1)")
        if self.l2_weight < 0:
            raise ConfigError("l2_weight must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.on_grid:
            logger.debug("MlpConfig off the standard grid: %s", self)

    @property
    def on_grid(self) -> bool:
        return all(getattr(self, k) in v for k, v in STANDARD_GRID.items())

    def layer_sizes(self, input_dim: int) -> list[int]:
        return [input_dim] + [self.hidden_size] * self.hidden_layers + [1]

    def n_params(self, input_dim: int) -> int:
        sizes = self.layer_sizes(input_dim)
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MlpConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        for k in ("hidden_layers", "hidden_size", "init_seed"):
            if k in known:
                known[k] = int(known[k])
        for k in ("dropout_prob", "l2_weight", "learning_rate"):
            if k in known:
                known[k] = float(known[k])
        return cls(**known)


@dataclass(eq=False)
class MlpParameters:
    """Weights ``W[l]`` of shape (fan_in, fan_out) and biases ``b[l]`` of shape (fan_out,)."""

    config: MlpConfig
    input_dim: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        sizes = self.config.layer_sizes(self.input_dim)
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("layer count does not match the config")
        for W, b, fi, fo in zip(self.weights, self.biases, sizes[:-1], sizes[1:]):
            if W.shape != (fi, fo) or b.shape != (fo,):
                raise ShapeError(f"layer shapes {W.shape}/{b.shape} do not chain as {fi}->{fo}")

    def copy(self) -> "MlpParameters":
        return MlpParameters(self.config, self.input_dim,
                             [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParameters":
        return MlpParameters(self.config, self.input_dim,
                             [np.zeros_like(W) for W in self.weights],
                             [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vector: np.ndarray) -> "MlpParameters":
        out = self.zeros_like()
        pos = 0
        for a in out.arrays():
            a[...] = np.asarray(vector[pos:pos + a.size]).reshape(a.shape)
            pos += a.size
        return out

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())


def init_model(input_dim: int, config: MlpConfig) -> MlpParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if int(input_dim) < 1:
        raise ConfigError("input_dim must be at least 1")
    if not isinstance(config, MlpConfig):
        raise ConfigError("config must be an MlpConfig")
    rng = np.random.default_rng(config.init_seed)
    sizes = config.layer_sizes(int(input_dim))
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(config, int(input_dim), weights, biases)


@dataclass(eq=False)
class ForwardCache:
    params: MlpParameters
    activations: list[np.ndarray]   # input followed by each (dropped-out) hidden activation
    preactivations: list[np.ndarray]
    masks: list[np.ndarray | None]
    scores: np.ndarray
    unclipped: np.ndarray = field(repr=False)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params: MlpParameters, X: np.ndarray, training: bool = False,
            dropout_seed: int | None = None) -> tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ShapeError(f"expected (batch, {params.input_dim}) input, got {X.shape}")
    if not np.isfinite(X).all():
        raise DomainError("non-finite input to forward")
    p = params.config.dropout_prob
    rng = np.random.default_rng(dropout_seed) if training and p > 0 else None

    a = X
    acts, pres, masks = [X], [], []
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ W + b
        a = np.maximum(z, 0.0)
        mask = None
        if rng is not None:
            mask = (rng.random(a.shape) >= p) / (1.0 - p)
            a = a * mask
        pres.append(z)
        acts.append(a)
        masks.append(mask)
    logits = (a @ params.weights[-1] + params.biases[-1])[:, 0]
    unclipped = np.abs(logits) < LOGIT_CLIP
    scores = sigmoid(np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP))
    return scores, ForwardCache(params, acts, pres, masks, scores, unclipped)


def backward(cache: ForwardCache, upstream: np.ndarray,
             params: MlpParameters | None = None) -> MlpParameters:
    """Gradients of ``loss + l2_weight * sum ||W||^2 / 2`` given ``dloss/dscores``.

    Passing ``params`` guards against using a cache from a different model.
    """
    if params is not None and params is not cache.params:
        raise StateError("forward cache belongs to a different parameter set")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.scores.shape:
        raise StateError(f"upstream gradient shape {upstream.shape} does not match the cached "
                         f"batch {cache.scores.shape}")
    P = cache.params
    grads = P.zeros_like()
    s = cache.scores
    dz = (upstream * s * (1.0 - s) * cache.unclipped)[:, None]
    n_layers = len(P.weights)
    for layer in range(n_layers - 1, -1, -1):
        a_in = cache.activations[layer]
        grads.weights[layer] = a_in.T @ dz
        grads.biases[layer] = dz.sum(axis=0)
        if layer == 0:
            break
        da = dz @ P.weights[layer].T
        mask = cache.masks[layer - 1]
        if mask is not None:
            da = da * mask
        dz = da * (cache.preactivations[layer - 1] > 0)
    l2 = P.config.l2_weight
    if l2:
        for g, W in zip(grads.weights, P.weights):
            g += l2 * W
    return grads


def l2_penalty(params: MlpParameters) -> float:
    return 0.5 * params.config.l2_weight * sum(float((W * W).sum()) for W in params.weights)


@dataclass(eq=False)
class AdamState:
    first: MlpParameters
    second: MlpParameters
    t: int = 0

    @classmethod
    def zeros(cls, params: MlpParameters) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: MlpParameters, grads: MlpParameters, state: AdamState,
              lr: float | None = None) -> tuple[MlpParameters, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    lr = params.config.learning_rate if lr is None else lr
    t = state.t + 1
    new_p, new_m, new_v = params.zeros_like(), params.zeros_like(), params.zeros_like()
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for p, g, m, v, po, mo, vo in zip(params.arrays(), grads.arrays(), state.first.arrays(),
                                      state.second.arrays(), new_p.arrays(), new_m.arrays(),
                                      new_v.arrays()):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError("gradient / moment shapes do not match parameters")
        mo[...] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        vo[...] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        po[...] = p - lr * (mo / c1) / (np.sqrt(vo / c2) + ADAM_EPS)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class Checkpoint:
    params: MlpParameters
    preprocessor: Any = None
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str | Path, params: MlpParameters, preprocessor: Any = None,
                    metadata: dict[str, Any] | None = None) -> None:
    """Write an ``.npz`` archive.

    Layout: ``meta`` holds a UTF-8 JSON document with keys ``format``,
    ``config``, ``input_dim``, ``n_layers``, ``preprocessor`` (or null) and
    ``metadata``; arrays ``W0..W{L-1}`` and ``b0..b{L-1}`` hold the layers.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "input_dim": params.input_dim,
        "n_layers": len(params.weights),
        "preprocessor": None if preprocessor is None else preprocessor.to_dict(),
        "metadata": metadata or {},
    }
    arrays = {f"W{i}": W for i, W in enumerate(params.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(params.biases)})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .data import Preprocessor

    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise StateError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
        n = meta["n_layers"]
        weights = [z[f"W{i}"].astype(np.float64) for i in range(n)]
        biases = [z[f"b{i}"].astype(np.float64) for i in range(n)]
    params = MlpParameters(MlpConfig.from_dict(meta["config"]), int(meta["input_dim"]),
                           weights, biases)
    pre = Preprocessor.from_dict(meta["preprocessor"]) if meta["preprocessor"] else None
    return Checkpoint(params, pre, meta["metadata"])
