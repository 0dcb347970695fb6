"""Empirical perturbation probes of the constraint bound.

The bound promises, to first order, that hidden-state perturbations of norm
delta change the output distribution by at most epsilon in L2.  These probes
measure the actual change over random directions at a given radius, and
locate the prediction-flip radius along a given direction by coarse scan
plus bisection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import stability

#: Above this value of radius * ||J||_F the first-order reading of the bound
#: is a stretch; reports carry a warning rather than an error.
FIRST_ORDER_LIMIT = 0.1

_DIRECTION_CHUNK = 256


@dataclass(frozen=True)
class ProbeResult:
    radius: float
    n_directions: int
    max_delta_o_norm: float
    mean_delta_o_norm: float
    flip_observed: bool
    seed: int


@dataclass(frozen=True)
class SafetyMarginReport:
    snapshot: stability.StabilitySnapshot
    probe: ProbeResult | None
    skipped: bool
    first_order_warning: bool


def probe_at_radius(W, h, radius: float, n_directions: int, seed: int = 0) -> ProbeResult:
    """Measure ||softmax(W(h + r*u)) - softmax(Wh)||_2 over random unit
    directions u, recording max, mean, and whether any argmax flip occurred."""
    if radius < 0.0:
        raise ValueError(f"radius must be nonnegative, got {radius!r}")
    if n_directions < 1:
        raise ValueError("need at least one direction")
    Wm = np.asarray(W, dtype=np.float64)
    ha = np.asarray(h, dtype=np.float64)
    if Wm.ndim != 2 or ha.ndim != 1 or Wm.shape[1] != ha.size:
        raise ValueError("W must be V x d and h length d")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed))))
    U = rng.normal(size=(n_directions, ha.size))
    U /= np.linalg.norm(U, axis=1, keepdims=True)

    z0 = Wm @ ha
    o0 = stability.softmax(z0)
    base_arg = int(np.argmax(o0))
    max_norm = 0.0
    total = 0.0
    flipped = False
    for start in range(0, n_directions, _DIRECTION_CHUNK):
        chunk = U[start : start + _DIRECTION_CHUNK]
        Z = z0[:, None] + radius * (Wm @ chunk.T)  # V x chunk
        Z = Z - Z.max(axis=0, keepdims=True)
        O = np.exp(Z)
        O /= O.sum(axis=0, keepdims=True)
        diff = O - o0[:, None]
        norms = np.linalg.norm(diff, axis=0)
        max_norm = max(max_norm, float(norms.max()))
        total += float(norms.sum())
        if not flipped and np.any(np.argmax(O, axis=0) != base_arg):
            flipped = True
    return ProbeResult(
        radius=float(radius),
        n_directions=n_directions,
        max_delta_o_norm=max_norm,
        mean_delta_o_norm=total / n_directions,
        flip_observed=flipped,
        seed=int(seed),
    )


def flip_radius(
    W,
    h,
    direction,
    max_radius: float,
    tol: float,
    coarse_steps: int = 64,
) -> float | None:
    """Smallest radius along ``direction`` at which the argmax token changes,
    or None if it never changes up to ``max_radius``.

    The argmax may flip more than once along a ray, so a coarse scan brackets
    the first flip before bisection refines it to within ``tol``.  Softmax is
    monotone, so argmax comparisons run directly on logits.
    """
    if not (tol > 0.0):
        raise ValueError(f"tol must be positive, got {tol!r}")
    if not (max_radius > 0.0):
        raise ValueError(f"max_radius must be positive, got {max_radius!r}")
    Wm = np.asarray(W, dtype=np.float64)
    ha = np.asarray(h, dtype=np.float64)
    u = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(u))
    if norm == 0.0:
        raise ValueError("direction must be nonzero")
    u = u / norm
    z0 = Wm @ ha
    z_dir = Wm @ u

    def arg_at(r: float) -> int:
        # np.argmax returns the lowest index on ties, matching the toolkit's
        # deterministic tie-break.
        return int(np.argmax(z0 + r * z_dir))

    base = arg_at(0.0)
    lo = 0.0
    hi = None
    for i in range(1, coarse_steps + 1):
        r = max_radius * i / coarse_steps
        if arg_at(r) != base:
            hi = r
            break
        lo = r
    if hi is None:
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if arg_at(mid) == base:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def safety_margin_report(
    W,
    h,
    epsilon: float,
    n_directions: int,
    seed: int = 0,
) -> SafetyMarginReport:
    """Compute the bound, then probe at exactly that radius.

    At radius delta the product radius * ||J||_F equals epsilon, so the
    first-order warning fires precisely when epsilon itself exceeds the
    first-order limit (e.g. under the epsilon = 1.0 reporting convention).
    Saturated points (infinite bound) skip the probe with a flag.
    """
    snapshot = stability.delta_tcb(W, h, epsilon=epsilon)
    if snapshot.saturated:
        return SafetyMarginReport(snapshot=snapshot, probe=None, skipped=True,
                                  first_order_warning=False)
    probe = probe_at_radius(W, h, snapshot.delta_tcb, n_directions, seed=seed)
    warn = snapshot.delta_tcb * math.sqrt(snapshot.jnorm_sq) > FIRST_ORDER_LIMIT
    return SafetyMarginReport(snapshot=snapshot, probe=probe, skipped=False,
                              first_order_warning=warn)
