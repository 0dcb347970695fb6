import math

import numpy as np
import pytest

from tcb_lab.geometry import (
    batch_geometry,
    cluster_competitors,
    disperse_competitors,
    run_geometry_experiment,
    synthetic_peaked_instance,
    synthetic_spread_instance,
    top_competitors,
)
from tcb_lab.stability import delta_tcb_from_probs


def _simple_instance():
    # token 0 dominates; tokens 1..3 are the competitors; token 4 carries no mass.
    W = np.array(
        [
            [2.0, 0.0],
            [0.0, 0.0],
            [0.0, 1.0],
            [-1.0, 0.0],
            [5.0, 5.0],
        ]
    )
    o = np.array([0.7, 0.15, 0.1, 0.05, 0.0])
    return W, o


def test_top_competitors_selection_and_ties():
    _, o = _simple_instance()
    top1, comps = top_competitors(o, 3)
    assert top1 == 0
    assert list(comps) == [1, 2, 3]
    # Equal probabilities tie-break to the lowest index.
    top1, comps = top_competitors([0.4, 0.2, 0.2, 0.2], 2)
    assert top1 == 0 and list(comps) == [1, 2]


def test_cluster_midpoint():
    W, o = _simple_instance()
    out = cluster_competitors(W, o, k_competitors=3, alpha=0.5)
    np.testing.assert_allclose(out[1], [1.0, 0.0])  # (0,0) halfway to (2,0)
    np.testing.assert_allclose(out[4], W[4])  # untouched non-competitor


def test_cluster_full_collapse():
    W, o = _simple_instance()
    out = cluster_competitors(W, o, k_competitors=3, alpha=1.0)
    for j in (1, 2, 3):
        np.testing.assert_allclose(out[j], W[0])


def test_cluster_composition():
    # Two alpha=0.5 moves equal one alpha=0.75 move: 1-(1-a)^2.
    W, o = _simple_instance()
    twice = cluster_competitors(cluster_competitors(W, o, 3, 0.5), o, 3, 0.5)
    once = cluster_competitors(W, o, 3, 0.75)
    np.testing.assert_allclose(twice, once, atol=1e-15)


def test_disperse_reflection():
    W, o = _simple_instance()
    out = disperse_competitors(W, o, k_competitors=3, beta=0.5)
    np.testing.assert_allclose(out[1], [-1.0, 0.0])  # (0,0) pushed away from (2,0)
    # distance to top1 scales by (1 + beta)
    for j in (1, 2, 3):
        assert np.linalg.norm(out[j] - W[0]) == pytest.approx(
            1.5 * np.linalg.norm(W[j] - W[0]), rel=1e-12
        )


def test_disperse_zero_beta_rejected_and_limit():
    W, o = _simple_instance()
    with pytest.raises(ValueError):
        disperse_competitors(W, o, 3, beta=0.0)
    tiny = disperse_competitors(W, o, 3, beta=1e-12)
    np.testing.assert_allclose(tiny, W, atol=1e-10)


def test_collinearity_invariant():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(20, 6))
    o = rng.dirichlet(np.ones(20))
    top1, comps = top_competitors(o, 5)
    for moved in (cluster_competitors(W, o, 5, 0.3), disperse_competitors(W, o, 5, 0.7)):
        for j in comps:
            a = W[j] - W[top1]
            b = moved[j] - W[top1]
            cross = np.linalg.norm(a) * np.linalg.norm(b) - abs(float(a @ b))
            assert abs(cross) <= 1e-12 * max(1.0, np.linalg.norm(a) * np.linalg.norm(b))


def test_k_bounds():
    W, o = _simple_instance()
    with pytest.raises(ValueError):
        cluster_competitors(W, o, k_competitors=5, alpha=0.5)
    with pytest.raises(ValueError):
        cluster_competitors(W, o, k_competitors=0, alpha=0.5)
    with pytest.raises(ValueError):
        cluster_competitors(W, o, 3, alpha=1.5)


def test_run_experiment_synthetic_peaked():
    W, o = synthetic_peaked_instance(64, 32, top1_mass=0.9, n_sharing=10, seed=0)
    outcome = run_geometry_experiment(W, o, k_competitors=10, alpha=0.5, beta=0.5)
    assert outcome.applicable
    assert outcome.hypothesis_held
    assert outcome.delta_cluster > outcome.delta_orig > outcome.delta_disperse


def test_run_experiment_identity_transforms():
    # alpha = beta = 0 leave W unchanged, so all three deltas are equal and
    # the strict ordering cannot hold.
    W, o = synthetic_peaked_instance(32, 8, top1_mass=0.8, n_sharing=5, seed=1)
    outcome = run_geometry_experiment(W, o, k_competitors=5, alpha=0.0, beta=0.0)
    assert outcome.delta_cluster == outcome.delta_orig == outcome.delta_disperse
    assert not outcome.hypothesis_held


def test_run_experiment_saturated_not_applicable():
    W = np.random.default_rng(2).normal(size=(8, 4))
    o = np.zeros(8)
    o[3] = 1.0
    outcome = run_geometry_experiment(W, o, k_competitors=3)
    assert not outcome.applicable
    assert math.isinf(outcome.delta_orig)


def test_full_collapse_with_confined_support():
    # Support confined to top1 + competitors; alpha = 1 collapses every
    # competitor onto the top embedding, so the o^2-weighted dispersion drops
    # to rounding noise and the cluster bound dwarfs the original.
    W, o = synthetic_peaked_instance(16, 8, top1_mass=0.9, n_sharing=10, seed=3)
    outcome = run_geometry_experiment(W, o, k_competitors=10, alpha=1.0, beta=0.5)
    assert outcome.delta_cluster > 1e6 * outcome.delta_orig
    assert outcome.hypothesis_held


def test_frozen_o_is_byte_identical():
    W, o = synthetic_peaked_instance(32, 8, top1_mass=0.9, n_sharing=6, seed=4)
    before = o.tobytes()
    run_geometry_experiment(W, o, k_competitors=6)
    assert o.tobytes() == before


def test_cluster_raises_delta_on_fresh_geometry():
    # Direct check of the mechanism on explicit numbers.
    W, o = _simple_instance()
    orig = delta_tcb_from_probs(W, o).delta_tcb
    clustered = delta_tcb_from_probs(cluster_competitors(W, o, 3, 0.5), o).delta_tcb
    dispersed = delta_tcb_from_probs(disperse_competitors(W, o, 3, 0.5), o).delta_tcb
    assert clustered > orig > dispersed


def test_batch_geometry_acceptance_shape():
    instances = [
        synthetic_peaked_instance(64, 32, top1_mass=0.9, n_sharing=10, seed=0, index=i)
        for i in range(50)
    ]
    table, outcomes = batch_geometry(instances, k_competitors=10)
    assert len(outcomes) == 50
    labels = [row[0] for row in table.rows]
    assert labels == ["v_eff < 20", "20 <= v_eff <= 100", "v_eff > 100", "overall"]
    held_pct = table.rows[3][2]
    assert held_pct >= 90.0


def test_batch_geometry_empty_bucket_is_na():
    instances = [
        synthetic_peaked_instance(64, 16, top1_mass=0.9, n_sharing=10, seed=5, index=i)
        for i in range(10)
    ]
    table, _ = batch_geometry(instances)
    # peaked instances all land in the low bucket; the others report n/a
    assert table.rows[1][1] == 0 and table.rows[1][2] is None
    assert table.rows[2][1] == 0 and table.rows[2][2] is None
    assert table.rows[0][2] is not None


def test_batch_geometry_identical_instances_never_nan():
    W, o = synthetic_peaked_instance(32, 8, top1_mass=0.9, n_sharing=5, seed=6)
    table, _ = batch_geometry([(W, o)] * 7, k_competitors=5)
    overall = table.rows[3][2]
    assert overall in (0.0, 100.0)


def test_spread_instances_cover_buckets():
    instances = [
        synthetic_spread_instance(512, 16, scale_range=(0.05, 6.0), seed=7, index=i)
        for i in range(60)
    ]
    table, outcomes = batch_geometry(instances)
    veffs = [oc.v_eff for oc in outcomes]
    assert min(veffs) < 20 < max(veffs)
    assert table.rows[3][1] == 60
