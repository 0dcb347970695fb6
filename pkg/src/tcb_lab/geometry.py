"""Embedding-geometry sensitivity experiments.

The bound depends on the output embeddings, not just on the probability
vector.  With o frozen, pulling competitor embeddings toward the top token
shrinks the o_i^2-weighted dispersion and should raise the bound; pushing
them away should lower it.  The tested ordering is

    delta(cluster) > delta(original) > delta(disperse)

which can legitimately fail when residual (non-competitor) probability mass
dominates the dispersion sum; outcomes are recorded, never filtered.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import stability
from ._parallel import ordered_map
from .report import ReportTable

DEFAULT_K_COMPETITORS = 10
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.5
DEFAULT_VEFF_BUCKETS = (20.0, 100.0)


@dataclass(frozen=True)
class GeometryOutcome:
    delta_orig: float
    delta_cluster: float
    delta_disperse: float
    hypothesis_held: bool
    v_eff: float
    applicable: bool = True


def top_competitors(o, k_competitors: int) -> tuple[int, np.ndarray]:
    """Top-1 index and the K highest-probability non-top1 token indices.

    Ties are broken by lowest index; selection happens once, before any
    mutation.
    """
    oa = stability.as_probability_vector(o)
    if not (0 < k_competitors < oa.size):
        raise ValueError(f"need 0 < K < V, got K={k_competitors}, V={oa.size}")
    order = np.lexsort((np.arange(oa.size), -oa))
    top1 = int(order[0])
    return top1, order[1 : k_competitors + 1].astype(np.intp)


def cluster_competitors(W, o, k_competitors: int = DEFAULT_K_COMPETITORS,
                        alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Move each competitor embedding toward the top-1 embedding:
    w_j <- w_j + alpha * (w_top1 - w_j)."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha!r}")
    Wm = np.asarray(W, dtype=np.float64)
    top1, comps = top_competitors(o, k_competitors)
    out = Wm.copy()
    if alpha == 1.0:
        out[comps] = Wm[top1]  # exact collapse, not w + (t - w) rounding
    else:
        out[comps] += alpha * (Wm[top1] - Wm[comps])
    return out


def disperse_competitors(W, o, k_competitors: int = DEFAULT_K_COMPETITORS,
                         beta: float = DEFAULT_BETA) -> np.ndarray:
    """Move each competitor embedding away from the top-1 embedding along the
    same line: w_j <- w_j - beta * (w_top1 - w_j)."""
    if not (beta > 0.0):
        raise ValueError(f"beta must be positive, got {beta!r}")
    Wm = np.asarray(W, dtype=np.float64)
    top1, comps = top_competitors(o, k_competitors)
    out = Wm.copy()
    out[comps] -= beta * (Wm[top1] - Wm[comps])
    return out


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def run_geometry_experiment(
    W,
    o,
    k_competitors: int = DEFAULT_K_COMPETITORS,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    epsilon: float = 1.0,
) -> GeometryOutcome:
    """Three bounds under a byte-identical probability vector.

    alpha = 0 or beta = 0 degenerate to the identity transform (all bounds
    equal, so the strict ordering cannot hold).  A saturated original
    (one-hot o) makes all three bounds infinite; the outcome is marked
    not-applicable instead of being scored.
    """
    Wm = np.asarray(W, dtype=np.float64)
    oa = stability.as_probability_vector(o)
    frozen = _digest(oa)

    snap_orig = stability.delta_tcb_from_probs(Wm, oa, epsilon=epsilon)
    if snap_orig.saturated:
        return GeometryOutcome(
            delta_orig=math.inf,
            delta_cluster=math.inf,
            delta_disperse=math.inf,
            hypothesis_held=False,
            v_eff=snap_orig.v_eff,
            applicable=False,
        )
    w_cluster = Wm if alpha == 0.0 else cluster_competitors(Wm, oa, k_competitors, alpha)
    w_disperse = Wm if beta == 0.0 else disperse_competitors(Wm, oa, k_competitors, beta)
    snap_cluster = stability.delta_tcb_from_probs(w_cluster, oa, epsilon=epsilon)
    snap_disperse = stability.delta_tcb_from_probs(w_disperse, oa, epsilon=epsilon)
    if _digest(oa) != frozen:
        raise AssertionError("probability vector mutated during geometry experiment")
    held = snap_cluster.delta_tcb > snap_orig.delta_tcb > snap_disperse.delta_tcb
    return GeometryOutcome(
        delta_orig=snap_orig.delta_tcb,
        delta_cluster=snap_cluster.delta_tcb,
        delta_disperse=snap_disperse.delta_tcb,
        hypothesis_held=bool(held),
        v_eff=snap_orig.v_eff,
    )


# --- synthetic instance generators ------------------------------------------


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def synthetic_peaked_instance(
    vocab_v: int,
    dim_d: int,
    top1_mass: float,
    n_sharing: int,
    seed: int,
    index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-row embeddings plus a peaked o: one token holds ``top1_mass`` and
    ``n_sharing`` competitors share the remainder; all other tokens get zero."""
    if not (0.0 < top1_mass < 1.0):
        raise ValueError("top1_mass must lie in (0, 1)")
    if n_sharing + 1 > vocab_v:
        raise ValueError("n_sharing + 1 exceeds vocabulary size")
    rng = _rng_for(seed, index)
    W = rng.normal(size=(vocab_v, dim_d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    support = rng.choice(vocab_v, size=n_sharing + 1, replace=False)
    o = np.zeros(vocab_v, dtype=np.float64)
    o[support[0]] = top1_mass
    o[support[1:]] = (1.0 - top1_mass) / n_sharing
    return W, o


def synthetic_spread_instance(
    vocab_v: int,
    dim_d: int,
    scale_range: tuple[float, float],
    seed: int,
    index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-row embeddings with o = softmax(s * g), g standard normal and the
    inverse temperature s drawn log-uniformly; spans flat to peaked regimes."""
    lo, hi = scale_range
    if not (0.0 < lo <= hi):
        raise ValueError("scale_range must be 0 < lo <= hi")
    rng = _rng_for(seed, index)
    W = rng.normal(size=(vocab_v, dim_d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    s = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    o = stability.softmax(s * rng.normal(size=vocab_v))
    return W, o


def batch_geometry(
    instances,
    k_competitors: int = DEFAULT_K_COMPETITORS,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    epsilon: float = 1.0,
    veff_buckets: tuple[float, float] = DEFAULT_VEFF_BUCKETS,
    threads: int | None = None,
) -> tuple[ReportTable, list[GeometryOutcome]]:
    """Run the experiment over (W, o) instances and tabulate hypothesis-held
    percentages per v_eff bucket plus overall.

    Not-applicable (saturated) instances are excluded everywhere; an empty
    bucket reports n/a cells.
    """
    low, high = veff_buckets
    if not (low < high):
        raise ValueError("veff_buckets must be (low, high) with low < high")

    def run_one(inst) -> GeometryOutcome:
        W, o = inst
        return run_geometry_experiment(W, o, k_competitors, alpha, beta, epsilon)

    outcomes = list(ordered_map(run_one, list(instances), threads=threads))
    usable = [oc for oc in outcomes if oc.applicable]

    def bucket_of(oc: GeometryOutcome) -> str:
        if oc.v_eff < low:
            return "low"
        if oc.v_eff > high:
            return "high"
        return "medium"

    labels = [
        ("low", f"v_eff < {low:g}"),
        ("medium", f"{low:g} <= v_eff <= {high:g}"),
        ("high", f"v_eff > {high:g}"),
    ]
    table = ReportTable(
        columns=["bucket", "n", "hypothesis_held_pct"],
        caption=(
            f"geometry ordering delta_cluster > delta_orig > delta_disperse "
            f"(K={k_competitors}, alpha={alpha:g}, beta={beta:g})"
        ),
    )
    for key, label in labels:
        members = [oc for oc in usable if bucket_of(oc) == key]
        if not members:
            table.add_row([label, 0, None])
        else:
            pct = 100.0 * sum(oc.hypothesis_held for oc in members) / len(members)
            table.add_row([label, len(members), pct])
    if usable:
        overall = 100.0 * sum(oc.hypothesis_held for oc in usable) / len(usable)
        table.add_row(["overall", len(usable), overall])
    else:
        table.add_row(["overall", 0, None])
    return table, outcomes
