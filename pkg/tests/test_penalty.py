import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lsvcmm.penalty import (
    PenaltyConfig,
    adaptive_weights,
    penalty_value,
    prox_rows,
    prox_sgl,
    soft_threshold,
    subgradient_residual,
)
from oracles import prox_numeric

finite = st.floats(-20, 20, allow_nan=False)


@given(
    arrays(float, st.integers(1, 5), elements=finite),
    st.floats(0, 5),
    st.floats(0, 1),
    st.floats(0, 3),
    st.floats(0.01, 3),
)
@settings(max_examples=150, deadline=None)
def test_prox_matches_numeric_minimizer(z, lam, alpha, gw, ew_scale):
    ew = np.full(len(z), ew_scale)
    got = prox_sgl(z, 1.0, lam, alpha, gw, ew)
    np.testing.assert_allclose(got, prox_numeric(z, 1.0, lam, alpha, gw, ew), atol=1e-6)


def test_prox_scalar_is_soft_threshold():
    # S = 1: both terms are absolute values, total threshold lam * (alpha * w + (1 - alpha) * gw)
    assert prox_sgl(np.array([3.0]), 1.0, 1.0, 0.5, 2.0, np.array([1.0]))[0] == pytest.approx(1.5)
    assert prox_sgl(np.array([-1.0]), 1.0, 1.0, 0.5, 2.0, np.array([1.0]))[0] == 0.0


def test_prox_group_kill():
    z = np.array([0.3, -0.4])  # norm 0.5
    assert not np.any(prox_sgl(z, 1.0, 1.0, 0.0, 0.5 / np.sqrt(2) + 1e-9, np.ones(2)))
    out = prox_sgl(z, 1.0, 1.0, 0.0, 0.25 / np.sqrt(2), np.ones(2))
    np.testing.assert_allclose(out, 0.5 * z)


@given(arrays(float, (3, 4), elements=finite), st.floats(0, 3), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_prox_rows_agrees_with_rowwise(B, lam, alpha):
    rng = np.random.default_rng(0)
    gw = rng.uniform(0, 2, size=3)
    ew = rng.uniform(0, 2, size=(3, 4))
    cfg = PenaltyConfig(lam, alpha, gw, ew, np.ones(3, dtype=bool))
    got = prox_rows(B, 0.7, cfg)
    for j in range(3):
        np.testing.assert_allclose(got[j], prox_sgl(B[j], 0.7, lam, alpha, gw[j], ew[j]), atol=1e-14)


@given(arrays(float, 5, elements=finite), st.floats(0, 3), st.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_prox_is_nonexpansive_shrinkage(z, lam, alpha):
    out = prox_sgl(z, 1.0, lam, alpha, 1.0, np.ones(5))
    assert np.linalg.norm(out) <= np.linalg.norm(z) + 1e-12
    assert np.all(out * z >= 0)


def test_masked_rows_pass_through():
    cfg = PenaltyConfig(10.0, 0.5, [0.0, 1.0], [[0.0, 0.0], [1.0, 1.0]], [False, True])
    out = prox_rows(np.array([[5.0, -5.0], [0.1, 0.1]]), 1.0, cfg)
    np.testing.assert_array_equal(out, [[5.0, -5.0], [0.0, 0.0]])


def test_penalty_value_by_hand():
    B = np.array([[3.0, -4.0]])
    cfg = PenaltyConfig(2.0, 0.25, [1.0], [[1.0, 2.0]], [True])
    expected = 2.0 * (0.75 * np.sqrt(2) * 5.0 + 0.25 * (3.0 + 8.0))
    assert penalty_value(B, cfg) == pytest.approx(expected)


def test_penalty_config_validation():
    with pytest.raises(ValueError):
        PenaltyConfig(-1.0, 0.5, [1.0], [[1.0]], [True])
    with pytest.raises(ValueError):
        PenaltyConfig(1.0, 1.5, [1.0], [[1.0]], [True])
    with pytest.raises(ValueError):
        PenaltyConfig(1.0, 0.5, [1.0], [[1.0]], [False])
    cfg = PenaltyConfig.uniform(0.3, 0.5, [False, True], 3)
    assert PenaltyConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_adaptive_weights_cap_and_mask():
    B = np.array([[1.0, 2.0], [0.0, 0.5]])
    gw, ew = adaptive_weights(B, 1.0, [False, True], cap=1e6)
    assert gw[0] == 0 and np.all(ew[0] == 0)
    assert gw[1] == pytest.approx(2.0)
    np.testing.assert_allclose(ew[1], [1e6, 2.0])


def test_soft_threshold():
    np.testing.assert_allclose(soft_threshold(np.array([-2.0, 0.5, 3.0]), 1.0), [-1.0, 0.0, 2.0])


def test_subgradient_residual_zero_at_prox_fixed_point():
    # b = prox(b - U) implies U + d penalty(b) = 0 on the support
    rng = np.random.default_rng(4)
    cfg = PenaltyConfig(0.8, 0.4, [1.0, 1.0], rng.uniform(0.5, 1.5, (2, 6)), [True, True])
    Z = rng.normal(size=(2, 6)) * 3
    B = prox_rows(Z, 1.0, cfg)
    U = B - Z
    np.testing.assert_allclose(subgradient_residual(U, B, cfg), 0.0, atol=1e-12)
