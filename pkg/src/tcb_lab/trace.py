"""Per-generation-step trace analytics: bound time series and dip detection.

A trace manifest carries one hidden state and one logits (or probs) tensor
per step, named ``h_step_<i>`` / ``logits_step_<i>`` / ``probs_step_<i>``
with contiguous indices from 0, plus emitted token ids in
``metadata["token_ids"]``.  Dips are scale-free events: a step that is a
strict local minimum of the bound and sits below its rolling-median baseline
by at least a severity ratio.  Sequence-level mean negative log probability
is computed alongside, since an aggregate likelihood can smooth over exactly
these local instabilities.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stability
from ._parallel import ordered_map
from .report import ReportTable
from .tensor_store import ManifestError, TensorManifest

DEFAULT_WINDOW = 7
DEFAULT_SEVERITY = 3.0

_STEP_NAME = re.compile(r"^(h|logits|probs)_step_(\d+)$")


@dataclass(frozen=True)
class TraceStep:
    step: int
    token_id: int
    emitted_prob: float
    snapshot: stability.StabilitySnapshot


@dataclass
class TraceRecord:
    steps: list[TraceStep]
    metadata: dict
    greedy_consistent: bool
    mean_neg_log_prob: float

    def delta_series(self) -> list[float]:
        return [s.snapshot.delta_tcb for s in self.steps]

    def top2_prob_series(self) -> list[float]:
        return [s.snapshot.top2_prob for s in self.steps]


@dataclass(frozen=True)
class DipEvent:
    step: int
    delta_value: float
    baseline: float
    severity: float


@dataclass(frozen=True)
class CoincidenceResult:
    table: ReportTable
    fraction: float | None


def _step_entries(manifest: TensorManifest) -> dict[int, dict[str, str]]:
    by_step: dict[int, dict[str, str]] = {}
    for entry in manifest.entries:
        match = _STEP_NAME.match(entry.name)
        if match:
            kind, idx = match.group(1), int(match.group(2))
            by_step.setdefault(idx, {})[kind] = entry.name
    return by_step


def analyze_trace(manifest: TensorManifest, epsilon: float = 1.0,
                  threads: int | None = None) -> TraceRecord:
    """One stability snapshot per generation step.

    Captured logits are the preferred signal (they are the model's ground
    truth even when z = W h does not hold exactly); stored probabilities come
    next, and the W h product is the fallback when only hidden states exist.
    """
    w_entries = manifest.by_role("W")
    if not w_entries:
        raise ManifestError("trace manifest has no W entry")
    W = manifest.load(w_entries[0].name)

    by_step = _step_entries(manifest)
    if not by_step:
        raise ManifestError("trace manifest has no per-step entries")
    n_steps = max(by_step) + 1
    for idx in range(n_steps):
        if idx not in by_step:
            raise ManifestError(f"trace is missing step {idx}")

    token_ids = manifest.metadata.get("token_ids")
    if token_ids is not None and len(token_ids) != n_steps:
        raise ManifestError(
            f"metadata token_ids has {len(token_ids)} entries for {n_steps} steps"
        )

    def snapshot_for(idx: int) -> tuple[stability.StabilitySnapshot, np.ndarray]:
        names = by_step[idx]
        if "logits" in names:
            z = manifest.load(names["logits"])
            return stability.snapshot_from_logits(W, z, epsilon=epsilon), stability.softmax(z)
        if "probs" in names:
            o = manifest.load(names["probs"])
            return stability.delta_tcb_from_probs(W, o, epsilon=epsilon), np.asarray(o)
        if "h" in names:
            h = manifest.load(names["h"])
            snap = stability.delta_tcb(W, h, epsilon=epsilon)
            return snap, stability.softmax(W @ h)
        raise ManifestError(f"step {idx} has neither logits, probs, nor h")

    results = ordered_map(snapshot_for, range(n_steps), threads=threads)

    steps: list[TraceStep] = []
    consistent = True
    nll_total = 0.0
    for idx, (snap, o) in enumerate(results):
        token = int(token_ids[idx]) if token_ids is not None else snap.top1_id
        if token != snap.top1_id:
            consistent = False
        p = float(o[token])
        nll_total += -math.log(p) if p > 0.0 else math.inf
        steps.append(TraceStep(step=idx, token_id=token, emitted_prob=p, snapshot=snap))
    return TraceRecord(
        steps=steps,
        metadata=dict(manifest.metadata),
        greedy_consistent=consistent,
        mean_neg_log_prob=nll_total / n_steps,
    )


def _as_series(trace) -> list[float]:
    if isinstance(trace, TraceRecord):
        return trace.delta_series()
    return [float(v) for v in trace]


def _rolling_baseline(series: list[float], t: int, window: int) -> float | None:
    """Median of the finite values in the length-``window`` neighborhood of t.

    The window is centered where possible and shifts (never shrinks) at the
    series boundaries; saturated steps never enter the baseline.
    """
    start = min(max(0, t - window // 2), len(series) - window)
    finite = [v for v in series[start : start + window] if math.isfinite(v)]
    if not finite:
        return None
    return float(np.median(finite))


def detect_dips(trace, window: int = DEFAULT_WINDOW,
                severity_threshold: float = DEFAULT_SEVERITY) -> list[DipEvent]:
    """Strict local minima of the bound whose rolling-median baseline exceeds
    them by at least ``severity_threshold``.

    Severity is the ratio baseline / value, so the output is invariant to
    uniform scaling of the series.  Saturated (infinite) steps are excluded
    from baselines and can never be dips.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window!r}")
    if not (severity_threshold > 1.0):
        raise ValueError(f"severity_threshold must exceed 1, got {severity_threshold!r}")
    series = _as_series(trace)
    if len(series) < window:
        raise ValueError(f"trace length {len(series)} shorter than window {window}")
    events: list[DipEvent] = []
    for t in range(1, len(series) - 1):
        value = series[t]
        if not math.isfinite(value):
            continue
        if not (value < series[t - 1] and value < series[t + 1]):
            continue
        baseline = _rolling_baseline(series, t, window)
        if baseline is None:
            continue
        severity = math.inf if value == 0.0 else baseline / value
        if severity >= severity_threshold:
            events.append(DipEvent(step=t, delta_value=value, baseline=baseline,
                                   severity=severity))
    return events


def dip_spike_coincidence(trace: TraceRecord, dips: list[DipEvent],
                          window: int = DEFAULT_WINDOW,
                          severity_threshold: float = DEFAULT_SEVERITY) -> CoincidenceResult:
    """For each dip, check whether P(2nd best) spikes at the same step by the
    mirrored severity rule (value / rolling median >= threshold)."""
    p2 = trace.top2_prob_series()
    table = ReportTable(
        columns=["step", "delta_value", "delta_severity", "p2nd_value",
                 "p2nd_baseline", "p2nd_spike", "coincident"],
        caption="dip / P(2nd best) spike coincidence",
    )
    if not dips:
        return CoincidenceResult(table=table, fraction=None)
    hits = 0
    for dip in dips:
        value = p2[dip.step]
        baseline = _rolling_baseline(p2, dip.step, window)
        if baseline is None or baseline == 0.0:
            spike = value > 0.0
        else:
            spike = value / baseline >= severity_threshold
        hits += spike
        table.add_row([dip.step, dip.delta_value, dip.severity, value, baseline,
                       bool(spike), bool(spike)])
    return CoincidenceResult(table=table, fraction=hits / len(dips))


# --- SVG rendering ------------------------------------------------------------

_SVG_W, _SVG_H = 800, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 64, 28, 40


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def render_trace_svg(trace: TraceRecord, dips: list[DipEvent], path) -> None:
    """Dual-axis line chart: bound on the left axis, P(2nd best) on the right,
    dip markers on top.  Output bytes are a pure function of the inputs.

    Saturated steps are clipped to the top of the left axis and drawn as
    hollow markers.
    """
    deltas = trace.delta_series()
    p2 = trace.top2_prob_series()
    n = len(deltas)
    if n == 0:
        raise ValueError("cannot render an empty trace")
    finite = [v for v in deltas if math.isfinite(v)]
    if not finite:
        raise ValueError("cannot render a trace with no finite bound values")

    dmax = max(finite)
    dmin = min(finite)
    span = dmax - dmin or 1.0
    dlo, dhi = dmin - 0.05 * span, dmax + 0.05 * span
    plot_w = _SVG_W - _MARGIN_L - _MARGIN_R
    plot_h = _SVG_H - _MARGIN_T - _MARGIN_B

    def x_at(i: int) -> float:
        return _MARGIN_L + (plot_w * i / max(1, n - 1))

    def y_delta(v: float) -> float:
        v = min(v, dhi)
        return _MARGIN_T + plot_h * (1.0 - (v - dlo) / (dhi - dlo))

    def y_p2(v: float) -> float:
        return _MARGIN_T + plot_h * (1.0 - v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect x="0" y="0" width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    delta_pts = " ".join(
        f"{_fmt(x_at(i))},{_fmt(y_delta(v if math.isfinite(v) else dhi))}"
        for i, v in enumerate(deltas)
    )
    p2_pts = " ".join(f"{_fmt(x_at(i))},{_fmt(y_p2(v))}" for i, v in enumerate(p2))
    parts.append(f'<polyline points="{delta_pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    parts.append(f'<polyline points="{p2_pts}" fill="none" stroke="#2ca02c" stroke-width="1.5"/>')
    for i, v in enumerate(deltas):
        if not math.isfinite(v):
            parts.append(
                f'<circle cx="{_fmt(x_at(i))}" cy="{_fmt(y_delta(dhi))}" r="4" '
                f'fill="none" stroke="#1f77b4" stroke-width="1.5"/>'
            )
    for dip in dips:
        parts.append(
            f'<circle cx="{_fmt(x_at(dip.step))}" cy="{_fmt(y_delta(dip.delta_value))}" '
            f'r="5" fill="none" stroke="#d62728" stroke-width="2"/>'
        )
    parts.append(
        f'<text x="{_MARGIN_L}" y="{_MARGIN_T - 10}" font-family="monospace" '
        f'font-size="12" fill="#1f77b4">constraint bound (left)</text>'
    )
    parts.append(
        f'<text x="{_SVG_W - _MARGIN_R - 150}" y="{_MARGIN_T - 10}" font-family="monospace" '
        f'font-size="12" fill="#2ca02c">P(2nd best) (right)</text>'
    )
    # Axis labels: min/max on the left, 0/1 on the right, step ids below.
    parts.append(
        f'<text x="4" y="{_fmt(y_delta(dmax) + 4)}" font-family="monospace" '
        f'font-size="11" fill="#444">{dmax:.4g}</text>'
    )
    parts.append(
        f'<text x="4" y="{_fmt(y_delta(dmin) + 4)}" font-family="monospace" '
        f'font-size="11" fill="#444">{dmin:.4g}</text>'
    )
    parts.append(
        f'<text x="{_SVG_W - _MARGIN_R + 6}" y="{_fmt(y_p2(1.0) + 4)}" '
        f'font-family="monospace" font-size="11" fill="#444">1.0</text>'
    )
    parts.append(
        f'<text x="{_SVG_W - _MARGIN_R + 6}" y="{_fmt(y_p2(0.0) + 4)}" '
        f'font-family="monospace" font-size="11" fill="#444">0.0</text>'
    )
    parts.append(
        f'<text x="{_MARGIN_L}" y="{_SVG_H - 12}" font-family="monospace" '
        f'font-size="11" fill="#444">step 0</text>'
    )
    parts.append(
        f'<text x="{_SVG_W - _MARGIN_R - 60}" y="{_SVG_H - 12}" font-family="monospace" '
        f'font-size="11" fill="#444">step {n - 1}</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", newline="")
