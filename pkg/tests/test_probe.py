import math

import numpy as np
import pytest

from tcb_lab.oracle import explicit_jacobian
from tcb_lab.probe import flip_radius, probe_at_radius, safety_margin_report
from tcb_lab.stability import delta_tcb, softmax

W2 = np.array([[1.0, 0.0], [-1.0, 0.0]])


def test_probe_zero_radius():
    result = probe_at_radius(W2, [1.0, 0.0], radius=0.0, n_directions=50, seed=0)
    assert result.max_delta_o_norm == 0.0
    assert result.mean_delta_o_norm == 0.0
    assert not result.flip_observed


def test_probe_deterministic():
    a = probe_at_radius(W2, [1.0, 0.0], radius=0.5, n_directions=200, seed=3)
    b = probe_at_radius(W2, [1.0, 0.0], radius=0.5, n_directions=200, seed=3)
    assert a == b
    c = probe_at_radius(W2, [1.0, 0.0], radius=0.5, n_directions=200, seed=4)
    assert a != c


def test_probe_flip_beyond_boundary():
    # Decision boundary along (-1, 0) sits at distance 1; radius 2 crosses it
    # for a fair share of random directions.
    result = probe_at_radius(W2, [1.0, 0.0], radius=2.0, n_directions=500, seed=0)
    assert result.flip_observed
    assert result.max_delta_o_norm >= result.mean_delta_o_norm >= 0.0


def test_probe_monotone_envelope():
    results = [
        probe_at_radius(W2, [1.0, 0.0], radius=r, n_directions=300, seed=11)
        for r in (0.05, 0.1, 0.2, 0.4, 0.8)
    ]
    maxima = [r.max_delta_o_norm for r in results]
    assert all(a <= b for a, b in zip(maxima, maxima[1:]))


def test_probe_respects_first_order_bound_small_eps():
    rng = np.random.default_rng(0)
    for i in range(5):
        W = rng.normal(size=(64, 8))
        h = rng.normal(size=8) * 0.05
        snap = delta_tcb(W, h, epsilon=0.01)
        result = probe_at_radius(W, h, snap.delta_tcb, n_directions=500, seed=i)
        assert result.max_delta_o_norm <= 1.1 * 0.01


def test_directional_derivative_under_frobenius():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(12, 5))
    h = rng.normal(size=5)
    o = softmax(W @ h)
    J = explicit_jacobian(W, o)
    fro = math.sqrt(float(np.sum(J * J)))
    for _ in range(100):
        u = rng.normal(size=5)
        u /= np.linalg.norm(u)
        assert float(np.linalg.norm(J @ u)) <= fro + 1e-10


def test_flip_radius_analytic_two_token():
    r = flip_radius(W2, [1.0, 0.0], [-1.0, 0.0], max_radius=3.0, tol=1e-7)
    assert r == pytest.approx(1.0, abs=1e-6)


def test_flip_radius_none_when_orthogonal():
    # Direction (0, 1) is orthogonal to both embedding rows: logits constant.
    assert flip_radius(W2, [1.0, 0.0], [0.0, 1.0], max_radius=10.0, tol=1e-6) is None


def test_flip_radius_none_within_max():
    assert flip_radius(W2, [1.0, 0.0], [-1.0, 0.0], max_radius=0.5, tol=1e-6) is None


def test_flip_radius_degenerate_start():
    # h on the tie already; stepping into the other region flips immediately.
    r = flip_radius(W2, [0.0, 0.0], [-1.0, 0.0], max_radius=1.0, tol=1e-6)
    assert r is not None and r <= 2e-2


def test_flip_radius_zero_direction_rejected():
    with pytest.raises(ValueError):
        flip_radius(W2, [1.0, 0.0], [0.0, 0.0], max_radius=1.0, tol=1e-6)


def test_flip_radius_bisection_bracket():
    rng = np.random.default_rng(2)
    tol = 1e-6
    found = 0
    for _ in range(20):
        W = rng.normal(size=(10, 4))
        h = rng.normal(size=4)
        u = rng.normal(size=4)
        r = flip_radius(W, h, u, max_radius=20.0, tol=tol)
        if r is None:
            continue
        found += 1
        z0 = W @ h
        zdir = W @ (u / np.linalg.norm(u))
        base = int(np.argmax(z0))
        assert int(np.argmax(z0 + (r - tol) * zdir)) == base
        assert int(np.argmax(z0 + (r + tol) * zdir)) != base
    assert found >= 5  # random rays cross boundaries often enough to exercise this


def test_safety_margin_report_saturated_skipped():
    report = safety_margin_report(W2, [60.0, 0.0], epsilon=1.0, n_directions=10, seed=0)
    assert report.skipped
    assert report.probe is None
    assert not report.first_order_warning


def test_safety_margin_warning_tracks_epsilon():
    # At the bound radius, radius * ||J||_F == epsilon, so the first-order
    # warning fires exactly when epsilon > 0.1.
    h = [0.3, 0.0]
    loud = safety_margin_report(W2, h, epsilon=1.0, n_directions=50, seed=0)
    assert not loud.skipped and loud.first_order_warning
    quiet = safety_margin_report(W2, h, epsilon=0.01, n_directions=50, seed=0)
    assert not quiet.skipped and not quiet.first_order_warning
    assert quiet.probe.max_delta_o_norm <= 1.1 * 0.01


def test_probe_validation():
    with pytest.raises(ValueError):
        probe_at_radius(W2, [1.0, 0.0], radius=-1.0, n_directions=10)
    with pytest.raises(ValueError):
        probe_at_radius(W2, [1.0, 0.0], radius=1.0, n_directions=0)
    with pytest.raises(ValueError):
        flip_radius(W2, [1.0, 0.0], [-1.0, 0.0], max_radius=0.0, tol=1e-6)
