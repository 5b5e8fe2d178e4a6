import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from dcfair.errors import ConfigError, DomainError, ShapeError, StateError
from dcfair.losses import FairnessMode, SinkhornConfig, composite_loss
from dcfair.model import (AdamState, MlpConfig, adam_step, backward, forward, init_model,
                          l2_penalty, load_checkpoint, save_checkpoint)


def test_init_shapes_and_determinism():
    cfg = MlpConfig(hidden_layers=2, hidden_size=16, init_seed=3)
    p = init_model(5, cfg)
    assert [W.shape for W in p.weights] == [(5, 16), (16, 16), (16, 1)]
    assert [b.shape for b in p.biases] == [(16,), (16,), (1,)]
    q = init_model(5, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert all(np.all(np.abs(W) <= 1 / math.sqrt(W.shape[0])) for W in p.weights)
    r = init_model(5, MlpConfig(hidden_layers=2, hidden_size=16, init_seed=4))
    assert not np.array_equal(p.weights[0], r.weights[0])
    with pytest.raises(ConfigError):
        init_model(0, cfg)


def test_config_grid_and_validation():
    assert MlpConfig().on_grid
    assert not MlpConfig(hidden_size=7).on_grid
    with pytest.raises(ConfigError):
        MlpConfig(learning_rate=0)
    assert MlpConfig.from_dict(MlpConfig(3, 32, 0.1, 0.05).to_dict()) == MlpConfig(3, 32, 0.1, 0.05)


def test_zero_weights_give_half():
    p = init_model(4, MlpConfig(hidden_size=16))
    p = p.with_flat(np.zeros(p.n_params))
    scores, _ = forward(p, np.random.default_rng(0).normal(size=(6, 4)))
    np.testing.assert_array_equal(scores, 0.5)


def test_eval_mode_ignores_dropout():
    p = init_model(4, MlpConfig(hidden_size=16, dropout_prob=0.1))
    X = np.random.default_rng(0).normal(size=(8, 4))
    a, _ = forward(p, X, training=False, dropout_seed=1)
    b, _ = forward(p, X, training=False, dropout_seed=2)
    np.testing.assert_array_equal(a, b)
    c, _ = forward(p, X, training=True, dropout_seed=1)
    assert not np.array_equal(a, c)


def scalar_forward(p, x):
    a = list(x)
    for W, b in zip(p.weights[:-1], p.biases[:-1]):
        a = [max(0.0, sum(a[i] * W[i, j] for i in range(len(a))) + b[j]) for j in range(W.shape[1])]
    z = sum(a[i] * p.weights[-1][i, 0] for i in range(len(a))) + p.biases[-1][0]
    return 1 / (1 + math.exp(-z))


def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    p = init_model(4, MlpConfig(hidden_layers=3, hidden_size=16, init_seed=5))
    X = rng.normal(size=(3, 4))
    scores, _ = forward(p, X)
    np.testing.assert_allclose(scores, [scalar_forward(p, x) for x in X], atol=1e-12, rtol=0)


def test_forward_errors_and_range():
    p = init_model(3, MlpConfig(hidden_size=16))
    with pytest.raises(ShapeError):
        forward(p, np.zeros((2, 4)))
    with pytest.raises(DomainError):
        forward(p, np.array([[0.0, np.inf, 0.0]]))
    big = p.with_flat(p.flat() * 50)
    scores, _ = forward(big, np.random.default_rng(0).normal(size=(50, 3)) * 100)
    assert np.all((scores > 0) & (scores < 1))


def test_backward_trivial_cases():
    p = init_model(3, MlpConfig(hidden_size=16))
    _, cache = forward(p, np.ones((4, 3)))
    g = backward(cache, np.zeros(4))
    assert all(not a.any() for a in g.arrays())
    q = init_model(3, MlpConfig(hidden_size=16, l2_weight=0.01))
    _, cache = forward(q, np.ones((4, 3)))
    g = backward(cache, np.zeros(4))
    for gw, W in zip(g.weights, q.weights):
        np.testing.assert_allclose(gw, 0.01 * W)
    assert all(not b.any() for b in g.biases)
    with pytest.raises(StateError):
        backward(cache, np.zeros(5))
    with pytest.raises(StateError):
        backward(cache, np.zeros(4), params=p)


def _fd_check(p, X, loss_of_scores, dropout_seed=None, h=1e-5):
    training = dropout_seed is not None
    scores, cache = forward(p, X, training=training, dropout_seed=dropout_seed)
    _, up = loss_of_scores(scores)
    analytic = backward(cache, up).flat()
    base = p.flat()
    numeric = np.empty_like(base)
    loss_scale = 0.0
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += h
        minus[i] -= h
        fp = p.with_flat(plus)
        fm = p.with_flat(minus)
        lp = loss_of_scores(forward(fp, X, training, dropout_seed)[0])[0] + l2_penalty(fp)
        lm = loss_of_scores(forward(fm, X, training, dropout_seed)[0])[0] + l2_penalty(fm)
        numeric[i] = (lp - lm) / (2 * h)
        loss_scale = max(loss_scale, abs(lp), abs(lm))
    # rounding in lp - lm bounds how small a component the differences can resolve
    noise = 10 * np.finfo(float).eps * loss_scale / h
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    return np.max(np.abs(analytic - numeric) / np.maximum(scale, noise * 1e4))


def test_backward_finite_differences_bce_with_dropout_and_l2():
    rng = np.random.default_rng(2)
    p = init_model(4, MlpConfig(hidden_layers=2, hidden_size=8, dropout_prob=0.1, l2_weight=0.01,
                                init_seed=1))
    X = rng.normal(size=(10, 4))
    y = rng.integers(0, 2, 10)
    from dcfair.losses import bce
    assert _fd_check(p, X, lambda s: bce(s, y), dropout_seed=7) < 1e-4


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.integers(2, 8),
       st.sampled_from(["none", "global", "decision_centric"]))
def test_backward_finite_differences_composite(seed, layers, width, mode):
    rng = np.random.default_rng(seed)
    # widths off the standard grid are allowed, only flagged
    p = init_model(3, MlpConfig(hidden_layers=layers, hidden_size=width, init_seed=seed))
    p = p.with_flat(rng.normal(0, 0.7, p.n_params))
    X = rng.normal(size=(10, 3))
    # central differences are meaningless across a ReLU kink
    scores, cache = forward(p, X)
    assume(all(np.abs(z).min() > 1e-4 for z in cache.preactivations))
    # nor across a top-k selection boundary
    assume(np.diff(np.sort(scores)).min() > 1e-4)
    y = rng.integers(0, 2, 10)
    s = np.tile([0, 1], 5)
    fm = FairnessMode(mode, 0.6 if mode == "decision_centric" else None)
    tight = SinkhornConfig(convergence_tol=1e-13, newton_max_steps=100)

    def loss(scores):
        value, grad = composite_loss(scores, y, s, 0.4, fm, tight)
        return value.total, grad

    assert _fd_check(p, X, loss, h=1e-5) < 1e-4


def test_dropout_expectation():
    p = init_model(3, MlpConfig(hidden_layers=2, hidden_size=16, dropout_prob=0.1))
    x = np.array([[0.5, -1.0, 2.0]])
    _, clean = forward(p, x)
    target = clean.preactivations[1][0]
    draws = np.array([forward(p, x, training=True, dropout_seed=i)[1].preactivations[1][0]
                      for i in range(10_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - target) <= 3 * se + 1e-12)


def test_adam_steps():
    p = init_model(2, MlpConfig(hidden_size=16))
    state = AdamState.zeros(p)
    q, s1 = adam_step(p, p.zeros_like(), state)
    assert s1.t == 1 and state.t == 0
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    ones = p.zeros_like().with_flat(np.ones(p.n_params))
    q, _ = adam_step(p, ones, AdamState.zeros(p), lr=0.01)
    np.testing.assert_allclose(q.flat() - p.flat(), -0.01, rtol=1e-6)
    a = adam_step(p, ones, AdamState.zeros(p))
    b = adam_step(p, ones, AdamState.zeros(p))
    assert np.array_equal(a[0].flat(), b[0].flat())
    other = init_model(3, MlpConfig(hidden_size=16))
    with pytest.raises(ShapeError):
        adam_step(p, other.zeros_like(), AdamState.zeros(p))


def test_checkpoint_roundtrip(tmp_path):
    p = init_model(4, MlpConfig(3, 32, 0.01, 0.05, 0.001, 9))
    save_checkpoint(tmp_path / "m.npz", p, metadata={"note": "x"})
    ck = load_checkpoint(tmp_path / "m.npz")
    assert ck.params.config == p.config and ck.params.input_dim == 4
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), ck.params.arrays()))
    assert ck.metadata == {"note": "x"} and ck.preprocessor is None
