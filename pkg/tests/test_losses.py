import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TIGHT, spread_scores
from dcfair.errors import ConfigError, DomainError
from dcfair.losses import (CalibrationWarning, FairnessMode, SinkhornConfig, bce,
                           calibrate_k_pct, composite_loss, exact_w1, sinkhorn_w1,
                           top_fraction, top_fraction_indices)
from dcfair.metrics import ScoreSet, abcc_tau



def test_bce_closed_forms():
    loss, grad = bce(np.array([0.5, 0.5]), np.array([0, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, [1.0, -1.0])
    loss, _ = bce(np.array([1.0, 0.0]), np.array([1, 0]))
    assert loss == pytest.approx(-math.log(1 - 1e-12), rel=1e-6)
    assert loss < 1e-11


def test_bce_matches_elementwise_formula():
    rng = np.random.default_rng(3)
    p, y = rng.uniform(0.01, 0.99, 10), rng.integers(0, 2, 10)
    loss, grad = bce(p, y)
    hand = sum(-(yi * math.log(pi) + (1 - yi) * math.log(1 - pi)) for pi, yi in zip(p, y)) / 10
    assert loss == pytest.approx(hand, abs=1e-12)
    np.testing.assert_allclose(grad, [(-yi / pi + (1 - yi) / (1 - pi)) / 10 for pi, yi in zip(p, y)],
                               atol=1e-12)


def test_bce_empty():
    with pytest.raises(DomainError):
        bce(np.array([]), np.array([]))


def test_exact_w1_hand_cases():
    assert exact_w1([0.2], [0.8]) == pytest.approx(0.6, abs=1e-15)
    assert exact_w1([0.1, 0.3], [0.2, 0.4]) == pytest.approx(0.1, abs=1e-15)
    assert exact_w1([0.3, 0.5, 0.9], [0.9, 0.3, 0.5]) == 0.0
    # unequal sizes: {0, 1} vs {0.5} moves half the mass 0.5 each way
    assert exact_w1([0.0, 1.0], [0.5]) == pytest.approx(0.5)
    with pytest.raises(DomainError):
        exact_w1([], [0.1])


samples = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(samples, samples, samples)
def test_exact_w1_is_a_metric(a, b, c):
    ab, ba = exact_w1(a, b), exact_w1(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert ab >= 0
    assert exact_w1(a, c) <= ab + exact_w1(b, c) + 1e-12
    assert exact_w1(a, a) == 0


@settings(max_examples=100, deadline=None)
@given(samples, samples, st.floats(-0.5, 0.5))
def test_exact_w1_shift_equivariant(a, b, c):
    shifted = exact_w1(np.add(a, c), np.add(b, c))
    assert shifted == pytest.approx(exact_w1(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(samples, samples)
def test_exact_w1_equals_cdf_area(a, b):
    assert exact_w1(a, b) == pytest.approx(abcc_tau(ScoreSet.from_groups(a, b), 0.0), abs=1e-12)


def test_sinkhorn_examples():
    same = sinkhorn_w1([0.3, 0.7], [0.3, 0.7])
    assert same.distance <= 0.02
    for eps in (0.5, 0.01, 1e-4):
        res = sinkhorn_w1([0.2], [0.8], SinkhornConfig(epsilon=eps))
        assert res.distance == abs(0.2 - 0.8) and res.objective == pytest.approx(0.6, abs=1e-15)
        assert res.converged


def test_sinkhorn_tracks_exact_w1_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a, b = rng.uniform(size=20), rng.uniform(size=20)
        res = sinkhorn_w1(a, b, SinkhornConfig(epsilon=0.005))
        assert res.converged
        assert abs(res.distance - exact_w1(a, b)) < 0.02


def test_sinkhorn_plan_marginals_and_gradient_shape():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=13), rng.uniform(size=7)
    res = sinkhorn_w1(a, b, TIGHT)
    np.testing.assert_allclose(res.plan.sum(axis=1), 1 / 13, atol=1e-12)
    np.testing.assert_allclose(res.plan.sum(axis=0), 1 / 7, atol=1e-12)
    assert res.grad_a.shape == (13,) and res.grad_b.shape == (7,)
    # moving both samples by the same amount leaves the cost unchanged
    assert res.grad_a.sum() + res.grad_b.sum() == pytest.approx(0, abs=1e-12)


def test_sinkhorn_large_uses_scaling_only():
    rng = np.random.default_rng(5)
    a, b = rng.beta(2, 5, 600), rng.beta(5, 2, 500)
    res = sinkhorn_w1(a, b)
    assert res.newton_steps == 0
    assert res.marginal_error < 1e-3
    assert abs(res.distance - exact_w1(a, b)) < 0.02


def test_sinkhorn_flags_nonconvergence_without_raising():
    rng = np.random.default_rng(9)
    a, b = rng.uniform(size=300), rng.uniform(size=300)
    res = sinkhorn_w1(a, b, SinkhornConfig(epsilon=1e-3, max_iters=1, newton_max_size=0))
    assert not res.converged and res.n_iter == 1
    assert np.isfinite(res.distance)


def test_sinkhorn_rejects_bad_input():
    with pytest.raises(DomainError):
        sinkhorn_w1([], [0.2])
    with pytest.raises(DomainError):
        sinkhorn_w1([np.nan], [0.2])
    with pytest.raises(ConfigError):
        SinkhornConfig(epsilon=0)


def test_sinkhorn_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, b = spread_scores(rng, 9), spread_scores(rng, 6)
    res = sinkhorn_w1(a, b, TIGHT)
    h = 1e-6
    for i in range(a.size):
        up, dn = a.copy(), a.copy()
        up[i] += h
        dn[i] -= h
        fd = (sinkhorn_w1(up, b, TIGHT).objective - sinkhorn_w1(dn, b, TIGHT).objective) / (2 * h)
        assert res.grad_a[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_top_fraction_examples():
    np.testing.assert_array_equal(top_fraction([0.1, 0.9, 0.4, 0.7], 0.5), [0.9, 0.7])
    np.testing.assert_array_equal(top_fraction([0.1, 0.9, 0.4], 1.0), [0.1, 0.9, 0.4])
    assert top_fraction(np.arange(5) / 5, 0.5).size == 3
    # tie on the cut: the later index wins
    np.testing.assert_array_equal(top_fraction_indices([0.5, 0.9, 0.5, 0.1], 0.5), [1, 2])
    with pytest.raises(DomainError):
        top_fraction([0.1], 0.0)


def test_calibrate_k_pct_examples():
    assert calibrate_k_pct(np.array([0.1, 0.6, 0.8, 0.9]), 0.7) == 0.5
    assert calibrate_k_pct(np.array([0.1, 0.6]), 0.0) == 1.0
    u = np.random.default_rng(0).uniform(size=1000)
    assert calibrate_k_pct(u, 0.7) == np.mean(u >= 0.7)
    assert abs(calibrate_k_pct(u, 0.7) - 0.3) < 0.05
    with pytest.warns(CalibrationWarning):
        assert calibrate_k_pct(np.array([0.1, 0.2]), 0.7) == 0.02
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        calibrate_k_pct(ScoreSet(np.array([0.9, 0.2]), np.array([1, 0]), np.array([0, 1])), 0.5)


def test_fairness_mode_validation():
    with pytest.raises(ConfigError):
        FairnessMode.decision_centric(0.0)
    assert FairnessMode.parse("decision-centric", 0.3) == FairnessMode.decision_centric(0.3)
    assert FairnessMode.parse("Global").kind == "global"


def _batch(rng, n=24):
    scores = spread_scores(rng, n)
    protected = np.tile([0, 1], n // 2)
    rng.shuffle(protected)
    return scores, rng.integers(0, 2, n), protected


def test_composite_lambda_zero_is_bce():
    rng = np.random.default_rng(1)
    s, y, p = _batch(rng)
    for mode in (FairnessMode.none(), FairnessMode.global_(), FairnessMode.decision_centric(0.3)):
        value, grad = composite_loss(s, y, p, 0.0, mode)
        assert value.total == value.bce_part
        np.testing.assert_array_equal(grad, bce(s, y)[1])


def test_composite_symmetric_groups():
    s = np.array([0.2, 0.2, 0.6, 0.6, 0.9, 0.9])
    p = np.array([0, 1, 0, 1, 0, 1])
    value, _ = composite_loss(s, np.array([0, 1, 1, 0, 1, 1]), p, 0.5, FairnessMode.global_())
    assert value.unfairness_part <= 0.02
    assert value.total == pytest.approx(0.5 * value.bce_part, abs=0.01)
    assert value.total == pytest.approx(0.5 * value.bce_part + 0.5 * value.unfairness_part,
                                        abs=1e-12)


def test_composite_gradient_is_weighted_sum():
    rng = np.random.default_rng(8)
    s, y, p = _batch(rng, 40)
    mode = FairnessMode.decision_centric(0.4)
    value, grad = composite_loss(s, y, p, 0.3, mode)
    _, bce_grad = bce(s, y)
    unfair = np.zeros_like(s)
    idx0, idx1 = np.flatnonzero(p == 0), np.flatnonzero(p == 1)
    top0 = idx0[top_fraction_indices(s[idx0], 0.4)]
    top1 = idx1[top_fraction_indices(s[idx1], 0.4)]
    res = sinkhorn_w1(s[top0], s[top1])
    unfair[top0], unfair[top1] = res.grad_a, res.grad_b
    np.testing.assert_allclose(grad, 0.7 * bce_grad + 0.3 * unfair, atol=1e-15)
    assert value.k_effective == (top0.size, top1.size)
    assert value.unfairness_part == res.objective


def test_composite_gradient_finite_differences_hand_batch():
    rng = np.random.default_rng(12)
    s, y, p = _batch(rng, 12)
    mode = FairnessMode.decision_centric(0.5)
    _, grad = composite_loss(s, y, p, 0.5, mode, TIGHT)
    h = 1e-6
    for i in range(12):
        up, dn = s.copy(), s.copy()
        up[i] += h
        dn[i] -= h
        fd = (composite_loss(up, y, p, 0.5, mode, TIGHT)[0].total
              - composite_loss(dn, y, p, 0.5, mode, TIGHT)[0].total) / (2 * h)
        assert grad[i] == pytest.approx(fd, rel=1e-4)


def test_composite_skips_degenerate_groups():
    s = np.array([0.2, 0.4, 0.9])
    value, grad = composite_loss(s, np.array([0, 1, 1]), np.array([0, 0, 1]), 0.5,
                                 FairnessMode.global_())
    assert value.penalty_skipped and value.unfairness_part == 0
    np.testing.assert_array_equal(grad, 0.5 * bce(s, np.array([0, 1, 1]))[1])
    value, _ = composite_loss(np.array([0.1, 0.2, 0.3, 0.4]), np.array([0, 1, 0, 1]),
                              np.array([0, 0, 1, 1]), 0.5, FairnessMode.decision_centric(0.5))
    assert value.penalty_skipped and value.k_effective == (1, 1)


def test_composite_rejects_bad_arguments():
    s, y, p = np.array([0.2, 0.4]), np.array([0, 1]), np.array([0, 1])
    with pytest.raises(ConfigError):
        composite_loss(s, y, p, 1.0, FairnessMode.global_())
    with pytest.raises(ConfigError):
        composite_loss(s, y, p, 0.5, FairnessMode.decision_centric())
    with pytest.raises(DomainError):
        composite_loss(s, y[:1], p, 0.5, FairnessMode.global_())
