"""Core stability metrics for a linear-softmax prediction head.

Given an output embedding matrix ``W`` (one row per token) and a hidden
state ``h``, the next-token distribution is ``o = softmax(W h)``.  The
sensitivity of ``o`` to perturbations of ``h`` is governed by the Jacobian
``J = (diag(o) - o o^T) W``, whose squared Frobenius norm has the closed
form

    ||J||_F^2 = sum_i o_i^2 * ||w_i - mu||^2,    mu = W^T o,

so the constraint bound ``delta = epsilon / ||J||_F`` is computable in
O(V*d) without materializing J.  All accumulations run over fixed-size row
blocks with compensated summation, so results do not depend on how work is
scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 1.0
DEFAULT_BLOCK_ROWS = 4096

#: Fixed serialization order for snapshot rows (CSV columns / JSON keys).
SNAPSHOT_FIELDS = (
    "step",
    "top1_id",
    "top1_prob",
    "top2_id",
    "top2_prob",
    "gamma_z",
    "v_eff",
    "s2",
    "s3",
    "s4",
    "jnorm_sq",
    "delta_tcb",
    "saturated",
)


@dataclass(frozen=True)
class MomentSet:
    """Power sums s_k = sum_i o_i^k of a probability vector, k in {2,3,4}."""

    s2: float
    s3: float
    s4: float


@dataclass(frozen=True)
class StabilitySnapshot:
    """All stability metrics for one prediction point.

    ``delta_tcb`` is a distance in hidden-state space (L2); ``gamma_z`` is in
    logit units.  ``saturated`` marks the one-hot limit where the Jacobian
    vanishes and ``delta_tcb`` is reported as +inf.
    """

    delta_tcb: float
    epsilon: float
    v_eff: float
    gamma_z: float
    jnorm_sq: float
    moments: MomentSet
    top1_id: int
    top1_prob: float
    top2_id: int
    top2_prob: float
    mean_embedding_norm: float
    saturated: bool

    def to_row(self, step: int | None = None) -> dict:
        """Serialize to a flat dict in the fixed SNAPSHOT_FIELDS order."""
        return {
            "step": step,
            "top1_id": self.top1_id,
            "top1_prob": self.top1_prob,
            "top2_id": self.top2_id,
            "top2_prob": self.top2_prob,
            "gamma_z": self.gamma_z,
            "v_eff": self.v_eff,
            "s2": self.moments.s2,
            "s3": self.moments.s3,
            "s4": self.moments.s4,
            "jnorm_sq": self.jnorm_sq,
            "delta_tcb": self.delta_tcb,
            "saturated": self.saturated,
        }


def _as_float64_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def _as_float64_matrix(W) -> np.ndarray:
    arr = np.asarray(W, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"weight matrix must be rank 2, got shape {arr.shape}")
    return arr


def as_probability_vector(o) -> np.ndarray:
    """Validate and return ``o`` as a float64 probability vector.

    Entries must lie in [0, 1] and sum to 1 within 1e-9 absolute.
    """
    arr = _as_float64_vector(o, "probability vector")
    if arr.size == 0:
        raise ValueError("probability vector is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError("probability vector contains non-finite entries")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("probability entries must lie in [0, 1]")
    total = float(np.sum(arr))
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total!r}, expected 1 within 1e-9")
    return arr


def softmax(z) -> np.ndarray:
    """Numerically safe softmax: exp(z - max z) normalized.

    The max shift is mandatory; without it logits around ~700 overflow
    float64.
    """
    zarr = _as_float64_vector(z, "logits")
    if zarr.size == 0:
        raise ValueError("softmax of empty logit vector")
    if not np.all(np.isfinite(zarr)):
        raise ValueError("logits must be finite")
    shifted = zarr - zarr.max()
    ez = np.exp(shifted)
    return ez / ez.sum()


def v_eff(o) -> float:
    """Effective vocabulary size 1 / sum(o_i^2); ranges from 1 to V."""
    arr = as_probability_vector(o)
    return 1.0 / float(np.dot(arr, arr))


def moments(o) -> MomentSet:
    """Power sums of the probability vector for k = 2, 3, 4."""
    arr = as_probability_vector(o)
    sq = arr * arr
    return MomentSet(
        s2=float(np.sum(sq)),
        s3=float(np.sum(sq * arr)),
        s4=float(np.sum(sq * sq)),
    )


def _top_two(values: np.ndarray) -> tuple[int, int]:
    """Indices of the two largest entries, ties broken by lowest index."""
    if values.size < 2:
        raise ValueError("need at least two entries to rank top-2")
    # Stable ordering: sort by (-value, index).
    order = np.lexsort((np.arange(values.size), -values))
    return int(order[0]), int(order[1])


def logit_margin(z) -> tuple[float, int, int]:
    """Top-1 minus top-2 logit plus the two indices (lowest-index ties)."""
    zarr = _as_float64_vector(z, "logits")
    top1, top2 = _top_two(zarr)
    return float(zarr[top1] - zarr[top2]), top1, top2


def mean_embedding(W, o, block_rows: int = DEFAULT_BLOCK_ROWS) -> np.ndarray:
    """Probability-weighted mean embedding mu = W^T o, accumulated in row blocks."""
    Wm = _as_float64_matrix(W)
    oa = _as_float64_vector(o, "probability vector")
    if Wm.shape[0] != oa.size:
        raise ValueError(f"W has {Wm.shape[0]} rows but o has {oa.size} entries")
    d = Wm.shape[1]
    mu = np.zeros(d, dtype=np.float64)
    comp = np.zeros(d, dtype=np.float64)
    for start in range(0, Wm.shape[0], block_rows):
        part = Wm[start : start + block_rows].T @ oa[start : start + block_rows]
        # Kahan step, elementwise over the d components.
        y = part - comp
        t = mu + y
        comp = (t - mu) - y
        mu = t
    return mu


def jacobian_norm_sq(W, o, block_rows: int = DEFAULT_BLOCK_ROWS) -> float:
    """Exact squared Frobenius norm of the output Jacobian.

    Returns sum_i o_i^2 ||w_i - mu||^2 without assembling the V x d Jacobian.
    Row blocks are reduced in a fixed order with compensated summation so the
    result is reproducible regardless of worker scheduling.
    """
    Wm = _as_float64_matrix(W)
    oa = _as_float64_vector(o, "probability vector")
    if Wm.shape[0] != oa.size:
        raise ValueError(f"W has {Wm.shape[0]} rows but o has {oa.size} entries")
    mu = mean_embedding(Wm, oa, block_rows=block_rows)
    total = 0.0
    comp = 0.0
    for start in range(0, Wm.shape[0], block_rows):
        rb = Wm[start : start + block_rows] - mu
        ob = oa[start : start + block_rows]
        part = float(np.einsum("i,ik,ik->", ob * ob, rb, rb))
        y = part - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def _blocked_logits(W: np.ndarray, h: np.ndarray, block_rows: int) -> np.ndarray:
    z = np.empty(W.shape[0], dtype=np.float64)
    for start in range(0, W.shape[0], block_rows):
        z[start : start + block_rows] = W[start : start + block_rows] @ h
    return z


def _assemble_snapshot(
    W: np.ndarray,
    o: np.ndarray,
    epsilon: float,
    gamma_z: float,
    top1: int,
    top2: int,
    block_rows: int,
) -> StabilitySnapshot:
    jn = jacobian_norm_sq(W, o, block_rows=block_rows)
    # One-hot at float precision: when the top probability rounds to exactly
    # 1.0, any nonzero jn is underflow noise from competitor masses below
    # ~1e-16, so the bound is reported as saturated rather than as a
    # meaningless 1e40-scale number.
    saturated = jn == 0.0 or float(o[top1]) == 1.0
    if saturated:
        jn = 0.0
    delta = math.inf if saturated else epsilon / math.sqrt(jn)
    mom = moments(o)
    mu = mean_embedding(W, o, block_rows=block_rows)
    return StabilitySnapshot(
        delta_tcb=delta,
        epsilon=epsilon,
        v_eff=1.0 / mom.s2,
        gamma_z=gamma_z,
        jnorm_sq=jn,
        moments=mom,
        top1_id=top1,
        top1_prob=float(o[top1]),
        top2_id=top2,
        top2_prob=float(o[top2]),
        mean_embedding_norm=float(np.linalg.norm(mu)),
        saturated=saturated,
    )


def _check_epsilon(epsilon: float) -> float:
    eps = float(epsilon)
    if not (eps > 0.0) or not math.isfinite(eps):
        raise ValueError(f"epsilon must be a positive finite number, got {epsilon!r}")
    return eps


def snapshot_from_logits(
    W,
    z,
    epsilon: float = DEFAULT_EPSILON,
    block_rows: int = DEFAULT_BLOCK_ROWS,
) -> StabilitySnapshot:
    """Full stability snapshot from explicit logits (o = softmax(z))."""
    eps = _check_epsilon(epsilon)
    Wm = _as_float64_matrix(W)
    zarr = _as_float64_vector(z, "logits")
    if Wm.shape[0] != zarr.size:
        raise ValueError(f"W has {Wm.shape[0]} rows but z has {zarr.size} entries")
    o = softmax(zarr)
    gamma, top1, top2 = logit_margin(zarr)
    return _assemble_snapshot(Wm, o, eps, gamma, top1, top2, block_rows)


def delta_tcb(
    W,
    h,
    epsilon: float = DEFAULT_EPSILON,
    block_rows: int = DEFAULT_BLOCK_ROWS,
) -> StabilitySnapshot:
    """Constraint bound at hidden state ``h``: z = W h, o = softmax(z),
    delta = epsilon / ||J||_F.

    A one-hot ``o`` (at float precision) gives a vanishing Jacobian; the bound
    is then +inf with ``saturated`` set rather than clamped to a made-up scale.
    """
    eps = _check_epsilon(epsilon)
    Wm = _as_float64_matrix(W)
    ha = _as_float64_vector(h, "hidden state")
    if Wm.shape[1] != ha.size:
        raise ValueError(f"W has {Wm.shape[1]} columns but h has {ha.size} entries")
    z = _blocked_logits(Wm, ha, block_rows)
    return snapshot_from_logits(Wm, z, epsilon=eps, block_rows=block_rows)


def delta_tcb_from_probs(
    W,
    o,
    epsilon: float = DEFAULT_EPSILON,
    block_rows: int = DEFAULT_BLOCK_ROWS,
) -> StabilitySnapshot:
    """Constraint bound with the probability vector supplied directly.

    The logit margin is recovered from log-probabilities: softmax is
    shift-invariant, so log(o_i) - log(o_j) equals z_i - z_j.  A zero top-2
    probability yields an infinite margin.
    """
    eps = _check_epsilon(epsilon)
    Wm = _as_float64_matrix(W)
    oa = as_probability_vector(o)
    if Wm.shape[0] != oa.size:
        raise ValueError(f"W has {Wm.shape[0]} rows but o has {oa.size} entries")
    top1, top2 = _top_two(oa)
    if oa[top2] > 0.0:
        gamma = float(math.log(oa[top1]) - math.log(oa[top2]))
    else:
        gamma = math.inf
    return _assemble_snapshot(Wm, oa, eps, gamma, top1, top2, block_rows)
