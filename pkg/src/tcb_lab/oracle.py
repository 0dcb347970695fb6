"""Brute-force reference implementations used to certify the closed forms.

Everything here is deliberately naive and dense: explicit Jacobian assembly,
central-difference differentiation, the softmax-derivative matrix identity,
and the probability-weighted covariance trace.  A scale guard keeps these
oracles at sizes where dense assembly stays instantaneous; the closed forms
in :mod:`tcb_lab.stability` exist precisely for everything larger.
"""

from __future__ import annotations

import numpy as np

from .stability import as_probability_vector, mean_embedding, moments, softmax

#: Upper bound on V*d for dense oracle work.
SCALE_GUARD = 1 << 22

FD_STEP_MIN = 1e-7
FD_STEP_MAX = 1e-3


def _guard(v: int, d: int) -> None:
    if v * d > SCALE_GUARD:
        raise ValueError(f"oracle scale guard exceeded: V*d = {v * d} > {SCALE_GUARD}")


def m_matrix(o) -> np.ndarray:
    """Dense softmax derivative M = diag(o) - o o^T."""
    oa = as_probability_vector(o)
    _guard(oa.size, oa.size)
    return np.diag(oa) - np.outer(oa, oa)


def explicit_jacobian(W, o) -> np.ndarray:
    """Dense Jacobian J = (diag(o) - o o^T) W.

    Row i equals o_i * (w_i - mu); tests assert that structure directly.
    """
    Wm = np.asarray(W, dtype=np.float64)
    oa = as_probability_vector(o)
    if Wm.ndim != 2 or Wm.shape[0] != oa.size:
        raise ValueError("W must be V x d with V matching the probability vector")
    _guard(Wm.shape[0], Wm.shape[1])
    return m_matrix(oa) @ Wm


def finite_diff_jacobian(W, h, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of softmax(W h) per hidden coordinate."""
    if not (FD_STEP_MIN <= step <= FD_STEP_MAX):
        raise ValueError(f"step must lie in [{FD_STEP_MIN}, {FD_STEP_MAX}], got {step!r}")
    Wm = np.asarray(W, dtype=np.float64)
    ha = np.asarray(h, dtype=np.float64)
    if Wm.ndim != 2 or ha.ndim != 1 or Wm.shape[1] != ha.size:
        raise ValueError("W must be V x d and h length d")
    v, d = Wm.shape
    _guard(v, d)
    jac = np.empty((v, d), dtype=np.float64)
    for k in range(d):
        hp = ha.copy()
        hm = ha.copy()
        hp[k] += step
        hm[k] -= step
        jac[:, k] = (softmax(Wm @ hp) - softmax(Wm @ hm)) / (2.0 * step)
    return jac


def m_norm_sq(o) -> float:
    """||M||_F^2 via the moment identity S2 - 2*S3 + S2^2.

    Algebraically this equals sum_i o_i^2 (1-o_i)^2 + sum_{i!=j} (o_i o_j)^2,
    a sum of squares, so a tiny negative from cancellation near the one-hot
    vertex is clamped to zero.
    """
    mom = moments(o)
    value = mom.s2 - 2.0 * mom.s3 + mom.s2 * mom.s2
    return max(0.0, value)


def covariance_trace(W, o) -> float:
    """Trace of the probability-weighted embedding covariance.

    Returns sum_i o_i * ||w_i - mu||^2 -- weighted by o_i, not o_i^2, which
    is what separates it from the Jacobian norm.  Cross-checks the variance
    identity sum_i o_i ||w_i||^2 - ||mu||^2 before returning.
    """
    Wm = np.asarray(W, dtype=np.float64)
    oa = as_probability_vector(o)
    if Wm.ndim != 2 or Wm.shape[0] != oa.size:
        raise ValueError("W must be V x d with V matching the probability vector")
    _guard(Wm.shape[0], Wm.shape[1])
    mu = mean_embedding(Wm, oa)
    resid = Wm - mu
    direct = float(np.einsum("i,ik,ik->", oa, resid, resid))
    via_identity = float(np.einsum("i,ik,ik->", oa, Wm, Wm)) - float(mu @ mu)
    scale = max(1.0, abs(direct))
    if abs(direct - via_identity) > 1e-12 * scale:
        raise ArithmeticError(
            f"variance identity violated: {direct!r} vs {via_identity!r}"
        )
    return direct
