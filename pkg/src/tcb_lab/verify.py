"""Self-contained verification suite: closed forms vs brute-force oracles.

Each property runs on seeded random instances and reports pass/fail with a
worst-case discrepancy, so a single command certifies the build end to end.
The checks call through the module namespaces (not captured references) so
fault-injection tests can observe a deliberately broken implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle, stability


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed))))


def _random_instance(rng: np.random.Generator, v_max: int = 64, d_max: int = 16):
    v = int(rng.integers(2, v_max + 1))
    d = int(rng.integers(1, d_max + 1))
    W = rng.uniform(-2.0, 2.0, size=(v, d))
    o = rng.dirichlet(np.ones(v))
    return W, o


def _rel_diff(a: float, b: float) -> float:
    scale = max(abs(a), abs(b), 1e-300)
    return abs(a - b) / scale


def check_norm_identity(seed: int, instances: int) -> PropertyResult:
    """Closed-form jacobian_norm_sq vs dense ||(diag(o) - o o^T) W||_F^2."""
    rng = _rng(seed)
    worst = 0.0
    for _ in range(instances):
        W, o = _random_instance(rng)
        closed = stability.jacobian_norm_sq(W, o)
        dense = float(np.sum(oracle.explicit_jacobian(W, o) ** 2))
        worst = max(worst, _rel_diff(closed, dense))
    return PropertyResult(
        name="closed-form-norm-identity",
        passed=worst <= 1e-10,
        detail=f"worst relative diff {worst:.3e} over {instances} instances (limit 1e-10)",
    )


def check_finite_difference(seed: int, instances: int = 100) -> PropertyResult:
    """Explicit Jacobian vs central differences at step 1e-5 on V=8, d=4."""
    rng = _rng(seed + 1)
    worst = 0.0
    for _ in range(instances):
        W = rng.uniform(-2.0, 2.0, size=(8, 4))
        h = rng.uniform(-1.0, 1.0, size=4)
        o = stability.softmax(W @ h)
        dense = oracle.explicit_jacobian(W, o)
        fd = oracle.finite_diff_jacobian(W, h, step=1e-5)
        worst = max(worst, float(np.max(np.abs(dense - fd))))
    return PropertyResult(
        name="finite-difference-gate",
        passed=worst <= 1e-6,
        detail=f"worst max-abs diff {worst:.3e} over {instances} instances (limit 1e-6)",
    )


def check_m_identity(seed: int, instances: int) -> PropertyResult:
    """Moment formula S2 - 2*S3 + S2^2 vs dense ||diag(o) - o o^T||_F^2."""
    rng = _rng(seed + 2)
    worst = 0.0
    for _ in range(instances):
        v = int(rng.integers(2, 65))
        o = rng.dirichlet(np.ones(v))
        formula = oracle.m_norm_sq(o)
        dense = float(np.sum(oracle.m_matrix(o) ** 2))
        worst = max(worst, abs(formula - dense))
    return PropertyResult(
        name="m-identity",
        passed=worst <= 1e-12,
        detail=f"worst abs diff {worst:.3e} over {instances} simplex points (limit 1e-12)",
    )


def check_covariance_distinction(seed: int, instances: int) -> PropertyResult:
    """jacobian_norm_sq < covariance_trace strictly for multi-token support."""
    rng = _rng(seed + 3)
    ok = True
    detail = "strict inequality held on every instance"
    for i in range(instances):
        W, o = _random_instance(rng)
        jn = stability.jacobian_norm_sq(W, o)
        ct = oracle.covariance_trace(W, o)
        if not jn < ct:
            ok = False
            detail = f"instance {i}: jnorm_sq {jn!r} !< covariance_trace {ct!r}"
            break
    if ok:
        # One-hot support: both quantities collapse to zero (the equality case).
        one_hot = np.zeros(4)
        one_hot[1] = 1.0
        W = _rng(seed + 4).uniform(-2.0, 2.0, size=(4, 3))
        jn = stability.jacobian_norm_sq(W, one_hot)
        ct = oracle.covariance_trace(W, one_hot)
        if jn != 0.0 or ct != 0.0:
            ok = False
            detail = f"one-hot support: expected 0 == 0, got {jn!r} vs {ct!r}"
    return PropertyResult(name="covariance-trace-distinction", passed=ok, detail=detail)


def check_row_structure(seed: int, instances: int) -> PropertyResult:
    """Each dense Jacobian row equals o_i * (w_i - mu)."""
    rng = _rng(seed + 5)
    worst = 0.0
    for _ in range(instances):
        W, o = _random_instance(rng)
        dense = oracle.explicit_jacobian(W, o)
        mu = stability.mean_embedding(W, o)
        expected = o[:, None] * (np.asarray(W, dtype=np.float64) - mu)
        worst = max(worst, float(np.max(np.abs(dense - expected))))
    return PropertyResult(
        name="row-structure",
        passed=worst <= 1e-12,
        detail=f"worst abs row deviation {worst:.3e} (limit 1e-12)",
    )


def check_probability_conservation(seed: int, instances: int) -> PropertyResult:
    """Rows of J @ dh sum to zero: perturbations preserve total probability."""
    rng = _rng(seed + 6)
    worst = 0.0
    for _ in range(instances):
        W, o = _random_instance(rng)
        J = oracle.explicit_jacobian(W, o)
        dh = rng.normal(size=W.shape[1])
        norm = float(np.linalg.norm(dh))
        if norm == 0.0:
            continue
        worst = max(worst, abs(float(np.sum(J @ (dh / norm)))))
    return PropertyResult(
        name="probability-conservation",
        passed=worst <= 1e-12,
        detail=f"worst |sum(delta_o)| {worst:.3e} (limit 1e-12)",
    )


def run_verification(seed: int = 0, instances: int = 1000) -> list[PropertyResult]:
    """Run the full oracle suite; property order is fixed for stable output."""
    return [
        check_norm_identity(seed, instances),
        check_finite_difference(seed),
        check_m_identity(seed, instances),
        check_covariance_distinction(seed, instances),
        check_row_structure(seed, instances),
        check_probability_conservation(seed, instances),
    ]
