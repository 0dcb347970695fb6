"""Command-line surface: snapshot, verify, ensemble, geometry, probe, trace.

Exit codes: 0 success, 1 input error, 2 degenerate data, 3 verification
failure, 64 usage error.  Seeds default to 0 and are echoed in every output
header, and every subcommand writes byte-identical output when re-run with
identical flags, inputs, and thread count.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, stability
from ._parallel import set_thread_cap
from .approx import delta_tcb_statistical
from .ensemble import (
    DegenerateDataError,
    EnsembleSpec,
    measure_diffuse_scaling,
    o_family_from_json,
    synthetic_correlation_study,
    validate_expectation_bridge,
)
from .geometry import batch_geometry, synthetic_peaked_instance, synthetic_spread_instance
from .probe import safety_margin_report
from .report import ReportTable, render_table
from .tensor_store import ManifestError, TensorFormatError, load_manifest
from .trace import analyze_trace, detect_dips, dip_spike_coincidence, render_trace_svg
from .verify import run_verification

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DEGENERATE = 2
EXIT_VERIFY = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse normally exits 2; we want 64
        raise UsageError(message)


def _config_header(config: dict) -> str:
    return "# " + json.dumps(_jsonable(config), sort_keys=True)


def _float_cell(x: float) -> str:
    return repr(float(x))


def _write_rows_csv(path: Path, config: dict, fields: tuple[str, ...], rows: list[dict]) -> None:
    lines = [_config_header(config), ",".join(fields)]
    for row in rows:
        cells = []
        for name in fields:
            value = row[name]
            if isinstance(value, bool):
                cells.append("true" if value else "false")
            elif isinstance(value, float):
                cells.append(_float_cell(value))
            elif value is None:
                cells.append("")
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n", newline="")


def _jsonable(value):
    # Strict JSON has no Infinity/NaN literals; keep such cells as strings.
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_rows_json(path: Path, config: dict, rows: list[dict]) -> None:
    doc = _jsonable({"config": config, "rows": rows})
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", newline="")


def _epsilon_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epsilon", type=float, default=stability.DEFAULT_EPSILON,
                        help="output-change tolerance (default 1.0)")


def _check_epsilon(args) -> None:
    if not (args.epsilon > 0.0) or not math.isfinite(args.epsilon):
        raise UsageError(f"--epsilon must be positive, got {args.epsilon!r}")


def _parse_step_index(name: str, ordinal: int) -> int:
    parts = name.rsplit("_", 1)
    if len(parts) == 2 and parts[1].isdigit():
        return int(parts[1])
    return ordinal


# --- snapshot -----------------------------------------------------------------


def cmd_snapshot(args) -> int:
    _check_epsilon(args)
    if args.with_approx and args.sigma is None and not args.sigma_from_w:
        raise UsageError("--with-approx requires --sigma VALUE or --sigma-from-W")
    manifest = load_manifest(args.manifest)
    w_entries = manifest.by_role("W")
    if not w_entries:
        raise ManifestError("manifest has no W entry")
    h_entries = manifest.by_role("h")
    if not h_entries:
        raise ManifestError("manifest has no h entries")
    W = manifest.load(w_entries[0].name)
    sigma_sq = None
    if args.with_approx:
        sigma_sq = float(np.var(W)) if args.sigma_from_w else float(args.sigma)
        if sigma_sq <= 0.0:
            raise UsageError("sigma^2 must be positive")

    fields = stability.SNAPSHOT_FIELDS
    if args.with_approx:
        fields = fields + ("method", "approx_jnorm_sq", "approx_delta_tcb")
    rows = []
    n_saturated = 0
    for ordinal, entry in enumerate(h_entries):
        h = manifest.load(entry.name)
        snap = stability.delta_tcb(W, h, epsilon=args.epsilon)
        n_saturated += snap.saturated
        row = snap.to_row(step=_parse_step_index(entry.name, ordinal))
        if args.with_approx:
            est = delta_tcb_statistical(
                stability.softmax(W @ h), d=W.shape[1], sigma_sq=sigma_sq,
                epsilon=args.epsilon,
            )
            row["method"] = est.method
            row["approx_jnorm_sq"] = est.jnorm_sq_estimate
            row["approx_delta_tcb"] = est.value
        rows.append(row)
    if n_saturated == len(rows):
        print("error: all prediction points are saturated (one-hot)", file=sys.stderr)
        return EXIT_DEGENERATE

    config = {
        "command": "snapshot",
        "manifest": str(args.manifest),
        "epsilon": args.epsilon,
        "seed": args.seed,
        "with_approx": bool(args.with_approx),
        "sigma_sq": sigma_sq,
        "entries": [e.name for e in h_entries],
    }
    out = Path(args.out)
    if out.suffix == ".json":
        _write_rows_json(out, config, rows)
    else:
        _write_rows_csv(out, config, fields, rows)
    print(f"wrote {len(rows)} snapshot rows to {out}")
    return EXIT_OK


# --- verify ---------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_verification(seed=args.seed, instances=args.instances)
    failed = None
    for res in results:
        tag = "PASS" if res.passed else "FAIL"
        print(f"[{tag}] {res.name}: {res.detail}")
        if not res.passed and failed is None:
            failed = res.name
    if failed is not None:
        print(f"verification failed: {failed}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} properties passed (seed={args.seed}, instances={args.instances})")
    return EXIT_OK


# --- ensemble -------------------------------------------------------------------


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ManifestError(f"spec file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None


def cmd_ensemble(args) -> int:
    doc = _load_json(args.spec)
    mode = doc.get("mode", "bridge")
    out = Path(args.out)
    if mode == "bridge":
        spec = EnsembleSpec(
            vocab_v=int(doc["vocab_v"]),
            dim_d=int(doc["dim_d"]),
            sigma_sq=float(doc.get("sigma_sq", 1.0)),
            seed=int(doc.get("seed", args.seed)),
            o_family=o_family_from_json(doc["o_family"]),
            n_draws=int(doc.get("n_draws", 1000)),
        )
        result = validate_expectation_bridge(spec)
        payload = {
            "config": {"command": "ensemble", "mode": mode, "spec": doc, "seed": spec.seed},
            "mean_exact_jnorm_sq": result.mean_exact_jnorm_sq,
            "predicted_jnorm_sq": result.predicted_jnorm_sq,
            "relative_error": result.relative_error,
            "rms_vs_mean_ratio": result.rms_vs_mean_ratio,
            "n_draws": spec.n_draws,
        }
    elif mode == "scaling":
        result = measure_diffuse_scaling(
            m_values=[int(m) for m in doc["m_values"]],
            dim_d=int(doc["dim_d"]),
            sigma_sq=float(doc.get("sigma_sq", 1.0)),
            seed=int(doc.get("seed", args.seed)),
            n_seeds=int(doc.get("n_seeds", 20)),
            epsilon=float(doc.get("epsilon", 1.0)),
            h_scale=float(doc.get("h_scale", 0.25)),
        )
        payload = {
            "config": {"command": "ensemble", "mode": mode, "spec": doc,
                       "seed": int(doc.get("seed", args.seed))},
            "slope": result.slope,
            "r_squared": result.fit.r_squared,
            "points": [
                {"m": p.m, "mean_delta": p.mean_delta, "mean_v_eff": p.mean_v_eff,
                 "n_used": p.n_used, "n_saturated": p.n_saturated}
                for p in result.points
            ],
        }
    elif mode == "correlation":
        study = synthetic_correlation_study(
            n_samples=int(doc.get("n_samples", 300)),
            regime=doc["regime"],
            seed=int(doc.get("seed", args.seed)),
            vocab_v=int(doc.get("vocab_v", 512)),
            dim_d=int(doc.get("dim_d", 32)),
            epsilon=float(doc.get("epsilon", 1.0)),
        )
        payload = {
            "config": {"command": "ensemble", "mode": mode, "spec": doc,
                       "seed": int(doc.get("seed", args.seed))},
            "regime": study.regime,
            "n_used": study.n_used,
            "n_excluded": study.n_excluded,
            "corr_delta_veff": study.corr_delta_veff,
            "corr_delta_gamma": study.corr_delta_gamma,
            "corr_gamma_veff": study.corr_gamma_veff,
        }
    else:
        raise UsageError(f"unknown ensemble mode {mode!r}")
    out.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=False) + "\n", newline="")
    print(f"wrote ensemble result ({mode}) to {out}")
    return EXIT_OK


# --- geometry -------------------------------------------------------------------


def _geometry_instances(args):
    if args.manifest:
        manifest = load_manifest(args.manifest)
        w_entries = manifest.by_role("W")
        h_entries = manifest.by_role("h")
        if not w_entries or not h_entries:
            raise ManifestError("geometry manifest needs a W entry and h entries")
        W = manifest.load(w_entries[0].name)
        spec_doc = {"source": "manifest", "path": str(args.manifest)}
        return [(W, stability.softmax(W @ manifest.load(e.name))) for e in h_entries], spec_doc
    doc = _load_json(args.synthetic)
    kind = doc.get("kind", "peaked")
    n = int(doc.get("n_instances", 100))
    v = int(doc.get("vocab_v", 64))
    d = int(doc.get("dim_d", 32))
    seed = int(doc.get("seed", args.seed))
    instances = []
    if kind == "peaked":
        top1_mass = float(doc.get("top1_mass", 0.9))
        n_sharing = int(doc.get("n_sharing", doc.get("k_competitors", args.k)))
        for i in range(n):
            instances.append(synthetic_peaked_instance(v, d, top1_mass, n_sharing, seed, i))
    elif kind == "spread":
        lo, hi = doc.get("scale_range", [0.2, 5.0])
        for i in range(n):
            instances.append(synthetic_spread_instance(v, d, (float(lo), float(hi)), seed, i))
    else:
        raise UsageError(f"unknown synthetic geometry kind {kind!r}")
    return instances, {"source": "synthetic", "spec": doc}


def cmd_geometry(args) -> int:
    _check_epsilon(args)
    if bool(args.manifest) == bool(args.synthetic):
        raise UsageError("give exactly one of --manifest or --synthetic")
    instances, spec_doc = _geometry_instances(args)
    table, outcomes = batch_geometry(
        instances, k_competitors=args.k, alpha=args.alpha, beta=args.beta,
        epsilon=args.epsilon,
    )
    n_na = sum(not oc.applicable for oc in outcomes)
    config = {
        "command": "geometry",
        "k": args.k,
        "alpha": args.alpha,
        "beta": args.beta,
        "epsilon": args.epsilon,
        "seed": args.seed,
        "n_instances": len(outcomes),
        "n_not_applicable": n_na,
        "input": spec_doc,
    }
    out = Path(args.out)
    body = render_table(table, "json" if out.suffix == ".json" else "csv")
    header = _config_header(config) + "\n" if out.suffix != ".json" else ""
    out.write_text(header + body, newline="")
    print(f"geometry report over {len(outcomes)} instances written to {out}")
    for row in table.rows:
        label, n, pct = row
        print(f"  {label}: " + ("n/a" if pct is None else f"{pct:.1f}% of {n}"))
    return EXIT_OK


# --- probe ----------------------------------------------------------------------


def cmd_probe(args) -> int:
    _check_epsilon(args)
    manifest = load_manifest(args.manifest)
    w_entries = manifest.by_role("W")
    h_entries = manifest.by_role("h")
    if not w_entries or not h_entries:
        raise ManifestError("probe manifest needs a W entry and h entries")
    W = manifest.load(w_entries[0].name)
    rows = []
    n_skipped = 0
    for ordinal, entry in enumerate(h_entries):
        h = manifest.load(entry.name)
        report = safety_margin_report(W, h, epsilon=args.epsilon,
                                      n_directions=args.directions, seed=args.seed)
        n_skipped += report.skipped
        row = {
            "entry": entry.name,
            "step": _parse_step_index(entry.name, ordinal),
            "delta_tcb": report.snapshot.delta_tcb,
            "jnorm_sq": report.snapshot.jnorm_sq,
            "saturated": report.snapshot.saturated,
            "skipped": report.skipped,
            "first_order_warning": report.first_order_warning,
        }
        if report.probe is not None:
            row.update(
                radius=report.probe.radius,
                max_delta_o_norm=report.probe.max_delta_o_norm,
                mean_delta_o_norm=report.probe.mean_delta_o_norm,
                flip_observed=report.probe.flip_observed,
            )
        rows.append(row)
    if n_skipped == len(rows):
        print("error: every prediction point saturated; nothing to probe", file=sys.stderr)
        return EXIT_DEGENERATE
    config = {
        "command": "probe",
        "manifest": str(args.manifest),
        "epsilon": args.epsilon,
        "directions": args.directions,
        "seed": args.seed,
    }
    _write_rows_json(Path(args.out), config, rows)
    print(f"wrote probe report for {len(rows)} points to {args.out}")
    return EXIT_OK


# --- trace ----------------------------------------------------------------------


def cmd_trace(args) -> int:
    _check_epsilon(args)
    manifest = load_manifest(args.manifest)
    record = analyze_trace(manifest, epsilon=args.epsilon)
    dips = detect_dips(record, window=args.window, severity_threshold=args.severity)
    coincidence = dip_spike_coincidence(record, dips, window=args.window,
                                        severity_threshold=args.severity)
    config = {
        "command": "trace",
        "manifest": str(args.manifest),
        "epsilon": args.epsilon,
        "window": args.window,
        "severity": args.severity,
        "seed": args.seed,
        "greedy_consistent": record.greedy_consistent,
        "mean_neg_log_prob": record.mean_neg_log_prob,
        "n_steps": len(record.steps),
        "n_dips": len(dips),
        "coincidence_fraction": coincidence.fraction,
    }
    fields = ("step", "token_id", "emitted_prob") + stability.SNAPSHOT_FIELDS[1:]
    rows = []
    for s in record.steps:
        row = {"step": s.step, "token_id": s.token_id, "emitted_prob": s.emitted_prob}
        row.update({k: v for k, v in s.snapshot.to_row(step=s.step).items() if k != "step"})
        rows.append(row)
    out = Path(args.out)
    if out.suffix == ".json":
        _write_rows_json(out, config, rows)
    else:
        _write_rows_csv(out, config, fields, rows)
    if args.dips:
        dip_rows = [
            {"step": d.step, "delta_value": d.delta_value, "baseline": d.baseline,
             "severity": d.severity}
            for d in dips
        ]
        _write_rows_csv(Path(args.dips), config, ("step", "delta_value", "baseline", "severity"),
                        dip_rows)
    if args.svg:
        render_trace_svg(record, dips, args.svg)
    frac = "n/a" if coincidence.fraction is None else f"{coincidence.fraction:.2f}"
    print(
        f"trace: {len(record.steps)} steps, {len(dips)} dips, "
        f"spike coincidence {frac}, greedy_consistent={record.greedy_consistent}"
    )
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tcb-lab",
                     description="Stability analysis toolkit for next-token predictions")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (env TCB_LAB_THREADS as fallback)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("snapshot", help="stability snapshot per hidden state in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _epsilon_flag(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--with-approx", action="store_true",
                   help="append the refined statistical estimate columns")
    p.add_argument("--sigma", type=float, default=None, help="weight variance sigma^2")
    p.add_argument("--sigma-from-W", dest="sigma_from_w", action="store_true",
                   help="estimate sigma^2 as the empirical element variance of W")
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("verify", help="run the oracle property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=1000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ensemble", help="random-matrix ensemble experiments")
    p.add_argument("--spec", required=True, help="JSON experiment spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("geometry", help="cluster/disperse competitor embeddings")
    p.add_argument("--manifest")
    p.add_argument("--synthetic", help="JSON synthetic instance spec")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    _epsilon_flag(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_geometry)

    p = sub.add_parser("probe", help="perturbation probe at the bound radius")
    p.add_argument("--manifest", required=True)
    _epsilon_flag(p)
    p.add_argument("--directions", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("trace", help="per-step trace analytics and dip detection")
    p.add_argument("--manifest", required=True)
    _epsilon_flag(p)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--severity", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dips", help="optional dip-event CSV path")
    p.add_argument("--svg", help="optional SVG chart path")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        set_thread_cap(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, TensorFormatError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateDataError as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    finally:
        set_thread_cap(None)


if __name__ == "__main__":
    sys.exit(main())
