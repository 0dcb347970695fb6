"""Monte-Carlo validation of the statistical weight-ensemble bridge.

The statistical approximation rests on E||M W||_F^2 = d * sigma^2 * ||M||_F^2
for i.i.d. zero-mean weights with the probability vector held fixed.  This
module draws Gaussian weight ensembles to measure that identity, the
sqrt(v_eff) scaling of the bound in the diffuse regime, and the sign
structure of the bound's correlations with v_eff and the logit margin on
synthetic data.

Weight draws are keyed by (seed, draw_index) through independent seed
sequences, so every result is bit-reproducible for any thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import stability
from ._parallel import ordered_map
from .oracle import m_norm_sq
from .report import LinearFit, ReportTable, linear_fit, pearson


class DegenerateDataError(RuntimeError):
    """All samples were saturated or otherwise unusable."""


# --- probability-vector families -------------------------------------------


@dataclass(frozen=True)
class FixedO:
    probs: tuple[float, ...]


@dataclass(frozen=True)
class UniformOverM:
    m: int


@dataclass(frozen=True)
class ZipfO:
    exponent: float


@dataclass(frozen=True)
class PeakedO:
    """softmax([margin, 0, ..., 0]) over n_competitors + 1 supported tokens."""

    margin: float
    n_competitors: int


OFamily = FixedO | UniformOverM | ZipfO | PeakedO


def resolve_o_family(family: OFamily, vocab_v: int) -> np.ndarray:
    """Concrete probability vector of length vocab_v for a family spec."""
    o = np.zeros(vocab_v, dtype=np.float64)
    if isinstance(family, FixedO):
        probs = np.asarray(family.probs, dtype=np.float64)
        if probs.size != vocab_v:
            raise ValueError(f"fixed o has {probs.size} entries, vocab_v = {vocab_v}")
        o = probs
    elif isinstance(family, UniformOverM):
        if not (1 <= family.m <= vocab_v):
            raise ValueError(f"uniform_over_m needs 1 <= m <= V, got m={family.m}")
        o[: family.m] = 1.0 / family.m
    elif isinstance(family, ZipfO):
        ranks = np.arange(1, vocab_v + 1, dtype=np.float64)
        weights = ranks ** (-float(family.exponent))
        o = weights / weights.sum()
    elif isinstance(family, PeakedO):
        n = int(family.n_competitors)
        if not (1 <= n <= vocab_v - 1):
            raise ValueError(f"peaked family needs 1 <= n_competitors <= V-1, got {n}")
        top = math.exp(float(family.margin))
        denom = top + n
        o[0] = top / denom
        o[1 : n + 1] = 1.0 / denom
    else:
        raise TypeError(f"unknown o_family {family!r}")
    return stability.as_probability_vector(o)


def o_family_from_json(doc: dict) -> OFamily:
    kind = doc.get("kind")
    if kind == "fixed":
        return FixedO(probs=tuple(float(p) for p in doc["probs"]))
    if kind == "uniform_over_m":
        return UniformOverM(m=int(doc["m"]))
    if kind == "zipf":
        return ZipfO(exponent=float(doc["exponent"]))
    if kind == "peaked":
        return PeakedO(margin=float(doc["margin"]), n_competitors=int(doc["n_competitors"]))
    raise ValueError(f"unknown o_family kind {kind!r}")


@dataclass(frozen=True)
class EnsembleSpec:
    vocab_v: int
    dim_d: int
    sigma_sq: float
    seed: int
    o_family: OFamily
    n_draws: int

    def __post_init__(self):
        if self.vocab_v < 1 or self.dim_d < 1:
            raise ValueError("vocab_v and dim_d must be positive")
        if not (self.sigma_sq > 0):
            raise ValueError("sigma_sq must be positive")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")


@dataclass(frozen=True)
class EnsembleResult:
    mean_exact_jnorm_sq: float
    predicted_jnorm_sq: float
    rms_vs_mean_ratio: float
    per_draw: tuple[float, ...]
    relative_error: float


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def draw_weight_matrix(spec: EnsembleSpec, draw_index: int) -> np.ndarray:
    """V x d matrix of i.i.d. N(0, sigma^2) entries, fully determined by
    (spec.seed, draw_index)."""
    rng = _rng_for(spec.seed, draw_index)
    return rng.normal(0.0, math.sqrt(spec.sigma_sq), size=(spec.vocab_v, spec.dim_d))


def validate_expectation_bridge(spec: EnsembleSpec, threads: int | None = None) -> EnsembleResult:
    """Compare the mean exact Jacobian norm over draws with the ensemble
    prediction d * sigma^2 * ||M||_F^2, for a fixed probability vector.

    Holding o fixed removes the decorrelation approximation by construction,
    so the identity is exact in expectation and the Monte-Carlo estimate
    converges at 1/sqrt(n_draws).
    """
    o = resolve_o_family(spec.o_family, spec.vocab_v)

    def one_draw(i: int) -> float:
        W = draw_weight_matrix(spec, i)
        return stability.jacobian_norm_sq(W, o)

    per_draw = tuple(ordered_map(one_draw, range(spec.n_draws), threads=threads))
    mean_exact = math.fsum(per_draw) / spec.n_draws
    predicted = spec.dim_d * spec.sigma_sq * m_norm_sq(o)
    if predicted == 0.0:
        rel = 0.0 if mean_exact == 0.0 else math.inf
    else:
        rel = abs(mean_exact - predicted) / predicted
    mean_norm = math.fsum(math.sqrt(x) for x in per_draw) / spec.n_draws
    rms_norm = math.sqrt(mean_exact)
    ratio = 1.0 if mean_norm == 0.0 else rms_norm / mean_norm
    return EnsembleResult(
        mean_exact_jnorm_sq=mean_exact,
        predicted_jnorm_sq=predicted,
        rms_vs_mean_ratio=ratio,
        per_draw=per_draw,
        relative_error=rel,
    )


# --- diffuse-regime scaling law ---------------------------------------------


@dataclass(frozen=True)
class ScalingPoint:
    m: int
    mean_delta: float
    mean_v_eff: float
    n_used: int
    n_saturated: int


@dataclass(frozen=True)
class ScalingResult:
    points: tuple[ScalingPoint, ...]
    slope: float
    fit: LinearFit


def measure_diffuse_scaling(
    m_values,
    dim_d: int,
    sigma_sq: float,
    seed: int = 0,
    n_seeds: int = 20,
    epsilon: float = 1.0,
    h_scale: float = 0.25,
    threads: int | None = None,
) -> ScalingResult:
    """End-to-end sqrt scaling check: for each vocabulary size m, draw
    Gaussian weights and a small random hidden state, compute the exact
    bound, then fit log(delta) against log(v_eff) across the m family.

    ``h_scale`` keeps logits close together so distributions stay diffuse;
    saturated draws (impossible here in practice, but m = 1 forces them)
    are excluded from the fit.
    """
    ms = [int(m) for m in m_values]

    def run_cell(cell: tuple[int, int]) -> tuple[float, float]:
        m, rep = cell
        if m < 2:
            # One-token vocabulary: softmax is identically 1, the Jacobian
            # vanishes, every draw saturates.
            return math.inf, 1.0
        rng = _rng_for(seed, m, rep)
        W = rng.normal(0.0, math.sqrt(sigma_sq), size=(m, dim_d))
        u = rng.normal(size=dim_d)
        h = (h_scale / np.linalg.norm(u)) * u
        snap = stability.delta_tcb(W, h, epsilon=epsilon)
        return snap.delta_tcb, snap.v_eff

    points: list[ScalingPoint] = []
    for m in ms:
        cells = ordered_map(run_cell, [(m, rep) for rep in range(n_seeds)], threads=threads)
        finite = [(d, v) for d, v in cells if math.isfinite(d)]
        n_sat = len(cells) - len(finite)
        if not finite:
            points.append(ScalingPoint(m=m, mean_delta=math.inf, mean_v_eff=1.0,
                                       n_used=0, n_saturated=n_sat))
            continue
        deltas = [d for d, _ in finite]
        veffs = [v for _, v in finite]
        points.append(
            ScalingPoint(
                m=m,
                mean_delta=math.fsum(deltas) / len(deltas),
                mean_v_eff=math.fsum(veffs) / len(veffs),
                n_used=len(finite),
                n_saturated=n_sat,
            )
        )
    usable = [p for p in points if p.n_used > 0]
    if len(usable) < 2:
        raise DegenerateDataError("fewer than two vocabulary sizes produced finite bounds")
    fit = linear_fit(
        [math.log(p.mean_v_eff) for p in usable],
        [math.log(p.mean_delta) for p in usable],
    )
    return ScalingResult(points=tuple(points), slope=fit.slope, fit=fit)


# --- synthetic correlation study --------------------------------------------

REGIME_DIVERSE = "diverse"
REGIME_PEAKED = "peaked"


@dataclass(frozen=True)
class CorrelationStudy:
    regime: str
    n_used: int
    n_excluded: int
    corr_delta_veff: float
    corr_delta_gamma: float
    corr_gamma_veff: float

    def to_table(self) -> ReportTable:
        table = ReportTable(
            columns=["pair", "pearson_r", "n", "n_excluded"],
            caption=f"synthetic correlation study ({self.regime} regime)",
        )
        table.add_row(["delta_tcb~v_eff", self.corr_delta_veff, self.n_used, self.n_excluded])
        table.add_row(["delta_tcb~gamma_z", self.corr_delta_gamma, self.n_used, self.n_excluded])
        table.add_row(["gamma_z~v_eff", self.corr_gamma_veff, self.n_used, self.n_excluded])
        return table


def _scale_for_target_veff(z_unit: np.ndarray, target: float) -> float:
    """Bisection for the logit scale s with v_eff(softmax(s * z)) ~ target.

    v_eff decreases monotonically in s for a fixed logit direction: s = 0
    is uniform (v_eff = V), s -> inf is one-hot (v_eff -> 1).
    """
    lo, hi = 0.0, 1.0
    for _ in range(80):
        if stability.v_eff(stability.softmax(hi * z_unit)) < target:
            break
        hi *= 2.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if stability.v_eff(stability.softmax(mid * z_unit)) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synthetic_correlation_study(
    n_samples: int,
    regime: str,
    seed: int = 0,
    vocab_v: int = 512,
    dim_d: int = 32,
    epsilon: float = 1.0,
    threads: int | None = None,
) -> CorrelationStudy:
    """Correlations of the bound with v_eff and the logit margin on synthetic
    (W, h) draws.

    diverse: per-sample target v_eff values span decades, so distribution
    flatness dominates; peaked: targets sit below 1.5, so the top-token
    margin dominates.  Saturated samples are excluded and counted.
    """
    if n_samples < 30:
        raise ValueError("need n_samples >= 30 for a meaningful correlation")
    if regime == REGIME_DIVERSE:
        lo, hi = 1.5, 0.7 * vocab_v
    elif regime == REGIME_PEAKED:
        lo, hi = 1.01, 1.45
    else:
        raise ValueError(f"unknown regime {regime!r}")

    def one_sample(i: int) -> tuple[float, float, float]:
        rng = _rng_for(seed, i)
        W = rng.normal(0.0, 1.0, size=(vocab_v, dim_d))
        u = rng.normal(size=dim_d)
        u /= np.linalg.norm(u)
        z_unit = W @ u
        target = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        s = _scale_for_target_veff(z_unit, target)
        snap = stability.snapshot_from_logits(W, s * z_unit, epsilon=epsilon)
        return snap.delta_tcb, snap.v_eff, snap.gamma_z

    samples = ordered_map(one_sample, range(n_samples), threads=threads)
    finite = [s for s in samples if math.isfinite(s[0])]
    n_excluded = len(samples) - len(finite)
    if len(finite) < 2:
        raise DegenerateDataError("all synthetic samples were saturated")
    deltas = [s[0] for s in finite]
    veffs = [s[1] for s in finite]
    gammas = [s[2] for s in finite]
    return CorrelationStudy(
        regime=regime,
        n_used=len(finite),
        n_excluded=n_excluded,
        corr_delta_veff=pearson(deltas, veffs),
        corr_delta_gamma=pearson(deltas, gammas),
        corr_gamma_veff=pearson(gammas, veffs),
    )
