import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcb_lab.oracle import (
    SCALE_GUARD,
    covariance_trace,
    explicit_jacobian,
    finite_diff_jacobian,
    m_matrix,
    m_norm_sq,
)
from tcb_lab.stability import jacobian_norm_sq, mean_embedding, softmax

W2 = np.array([[1.0, 0.0], [-1.0, 0.0]])
W3 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
O3 = np.array([0.7, 0.2, 0.1])


def test_explicit_jacobian_two_token():
    np.testing.assert_allclose(explicit_jacobian(W2, [0.5, 0.5]), [[0.5, 0.0], [-0.5, 0.0]])


def test_explicit_jacobian_one_hot_is_zero():
    np.testing.assert_array_equal(explicit_jacobian(W3, [0.0, 1.0, 0.0]), np.zeros((3, 2)))


def test_explicit_jacobian_row_formula():
    jac = explicit_jacobian(W3, O3)
    expected = np.array(
        [
            [0.7 * 0.4, 0.7 * -0.1],
            [0.2 * -0.6, 0.2 * 0.9],
            [0.1 * -1.6, 0.1 * -1.1],
        ]
    )
    np.testing.assert_allclose(jac, expected, atol=1e-15)


def test_row_structure_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v, d = int(rng.integers(2, 40)), int(rng.integers(1, 10))
        W = rng.uniform(-2, 2, size=(v, d))
        o = rng.dirichlet(np.ones(v))
        jac = explicit_jacobian(W, o)
        mu = mean_embedding(W, o)
        np.testing.assert_allclose(jac, o[:, None] * (W - mu), atol=1e-12)


def test_scale_guard():
    with pytest.raises(ValueError, match="scale guard"):
        explicit_jacobian(np.zeros((SCALE_GUARD, 2)), np.full(SCALE_GUARD, 1.0 / SCALE_GUARD))


def test_finite_diff_matches_explicit():
    rng = np.random.default_rng(1)
    for _ in range(100):
        W = rng.uniform(-2, 2, size=(8, 4))
        h = rng.uniform(-1, 1, size=4)
        dense = explicit_jacobian(W, softmax(W @ h))
        fd = finite_diff_jacobian(W, h, step=1e-5)
        assert float(np.max(np.abs(dense - fd))) <= 1e-6


def test_finite_diff_antisymmetric_two_token():
    fd = finite_diff_jacobian(W2, np.zeros(2), step=1e-5)
    np.testing.assert_allclose(fd[0], -fd[1], atol=1e-9)


def test_finite_diff_null_direction():
    # Second hidden coordinate never touches the logits: zero column.
    fd = finite_diff_jacobian(W2, np.array([0.3, 5.0]), step=1e-5)
    np.testing.assert_allclose(fd[:, 1], 0.0, atol=1e-12)


def test_finite_diff_step_bounds():
    with pytest.raises(ValueError):
        finite_diff_jacobian(W2, np.zeros(2), step=1e-8)
    with pytest.raises(ValueError):
        finite_diff_jacobian(W2, np.zeros(2), step=1e-2)


def test_m_norm_sq_cases():
    assert m_norm_sq([0.5, 0.5]) == pytest.approx(0.25, rel=1e-15)
    np.testing.assert_allclose(
        m_matrix([0.5, 0.5]), [[0.25, -0.25], [-0.25, 0.25]]
    )
    assert m_norm_sq(O3) == pytest.approx(0.1276, abs=1e-15)
    assert m_norm_sq([1.0, 0.0, 0.0]) == 0.0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 64))
def test_m_identity_property(seed, v):
    o = np.random.default_rng(seed).dirichlet(np.ones(v))
    dense = float(np.sum(m_matrix(o) ** 2))
    assert abs(m_norm_sq(o) - dense) <= 1e-12


def test_covariance_trace_cases():
    assert covariance_trace(W2, [0.5, 0.5]) == pytest.approx(1.0, rel=1e-15)
    assert jacobian_norm_sq(W2, [0.5, 0.5]) == pytest.approx(0.5, rel=1e-15)  # differs
    assert covariance_trace(W3, [0.0, 1.0, 0.0]) == 0.0
    assert covariance_trace(np.eye(4), [0.25] * 4) == pytest.approx(0.75, rel=1e-14)


def test_weighting_distinction():
    rng = np.random.default_rng(2)
    for _ in range(200):
        v, d = int(rng.integers(2, 40)), int(rng.integers(1, 10))
        W = rng.uniform(-2, 2, size=(v, d))
        o = rng.dirichlet(np.ones(v))
        assert jacobian_norm_sq(W, o) < covariance_trace(W, o)


def test_probability_conservation():
    rng = np.random.default_rng(3)
    for _ in range(100):
        v, d = int(rng.integers(2, 40)), int(rng.integers(1, 10))
        W = rng.uniform(-2, 2, size=(v, d))
        o = rng.dirichlet(np.ones(v))
        dh = rng.normal(size=d)
        dh /= np.linalg.norm(dh)
        assert abs(float(np.sum(explicit_jacobian(W, o) @ dh))) <= 1e-12
