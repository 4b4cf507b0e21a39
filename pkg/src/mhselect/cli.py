"""
Command-line front end.

Subcommands::

    mhselect simulate  --config DGP --seed N --out DIR
    mhselect estimate  --panel CSV --premiums CSV [--config RUN] [--seed N] --out DIR
    mhselect mc-study  --config DGP --seed N --out DIR
    mhselect report    BUNDLE.json [BUNDLE.json ...] [--out DIR]

``estimate`` writes ``report.json`` (schema version :data:`SCHEMA_VERSION`),
``mte_curve.csv``, ``support.csv`` and ``dropped_rows.csv``.  With
``--reps 0`` no bootstrap runs and CI fields are omitted from the report and
left empty in the curve file.  Every failure exits non-zero with a message
naming the failing stage.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__, market, pipeline
from .config import ConfigError, RunSettings, config_hash, dump_dgp, load_dgp, load_run_settings
from .econometrics import (
    ESTIMATORS,
    PERCENTILES,
    EstimationError,
    MteFit,
    cluster_bootstrap,
    mte_curve,
    percentile_key,
)
from .econometrics.mte import U_STEP
from .synthgen import export_pipeline, simulate_roy, true_mte

__all__ = [
    "SCHEMA_VERSION",
    "StageError",
    "main",
    "fit_estimator",
    "estimate_with_bootstrap",
    "build_report",
    "mc_study",
    "summarise_mc",
    "report_table",
]

log = logging.getLogger("mhselect")

SCHEMA_VERSION = 1
CURVE_GRID = np.round(np.arange(1, 100) * U_STEP, 2)


class StageError(RuntimeError):
    """Failure attributed to a named stage of a command."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _curve_key(u) -> str:
    return f"curve_{int(round(u * 100)):02d}"


# --- estimation helpers -----------------------------------------------------

def fit_estimator(data, estimator="normal", bandwidth=None, degree=None) -> MteFit:
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    data = data.prune_covariates()
    if estimator == "semipar":
        kwargs = {"bandwidth": bandwidth}
        if degree is not None:
            kwargs["degree"] = degree
        return ESTIMATORS[estimator](data, **kwargs)
    return ESTIMATORS[estimator](data)


def _statistics(fit: MteFit) -> dict:
    stats = fit.statistics()
    u, values = mte_curve(fit)
    curve = dict(zip(np.round(u, 2), values))
    for g in CURVE_GRID:
        stats[_curve_key(g)] = float(curve.get(g, np.nan))
    return stats


def estimate_with_bootstrap(data, estimator="normal", reps=0, seed=0, bandwidth=None,
                            degree=None, n_jobs=1):
    """Fit once and, when ``reps > 0``, bootstrap every statistic by cluster.

    Returns ``(fit, stats, intervals, failed)``; ``intervals`` is ``None``
    without a bootstrap.  Curve points are bootstrapped along with the table.
    """
    fit = fit_estimator(data, estimator, bandwidth, degree)
    stats = _statistics(fit)
    if not reps:
        return fit, stats, None, 0
    result = cluster_bootstrap(
        data, lambda sample: _statistics(fit_estimator(sample, estimator, bandwidth, degree)),
        reps=reps, seed=seed, names=tuple(stats), n_jobs=n_jobs)
    return fit, stats, result.intervals(), result.failed


def _num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def _with_ci(entry, key, intervals):
    if intervals is not None:
        lo, hi = intervals.get(key, (np.nan, np.nan))
        entry["ci_lo"], entry["ci_hi"] = _num(lo), _num(hi)
    return entry


def build_report(fit: MteFit, stats, intervals, failed, reps, metadata, sample=None) -> dict:
    """Assemble the JSON-serialisable report bundle."""
    table = []
    for u, flagged in zip(fit.percentiles, fit.outside_support):
        key = percentile_key(u)
        entry = {"u": u, "estimate": _num(stats[key]), "outside_support": bool(flagged)}
        table.append(_with_ci(entry, key, intervals))
    first_stage = [_with_ci({"name": name, "coef": _num(stats[f"fs_{name}"])}, f"fs_{name}", intervals)
                   for name in fit.instrument_names]
    report = {
        "schema_version": SCHEMA_VERSION,
        "metadata": metadata,
        "estimator": fit.kind,
        "n": fit.n,
        "percentiles": table,
        "ate": _with_ci({"estimate": _num(stats["ate"])}, "ate", intervals),
        "first_stage": first_stage,
        "bootstrap": {"reps": int(reps), "failed": int(failed)},
    }
    if fit.kind == "normal":
        report["selection"] = {k: _with_ci({"estimate": _num(stats[k])}, k, intervals)
                               for k in ("sigma_1v", "sigma_0v", "cov_gap")}
    else:
        report["smoothing"] = {"bandwidth": fit.bandwidth, "degree": fit.degree}
    if fit.support is not None:
        report["support"] = {"p_lo": fit.support.p_lo, "p_hi": fit.support.p_hi,
                             "bin_width": fit.support.bin_width,
                             "min_count": fit.support.min_count, "n_bins": fit.support.n_bins}
    else:
        report["support"] = None
    if sample is not None:
        report["sample"] = sample
    return report


def _write_curve(path, fit, stats, intervals):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["u", "mte", "ci_lo", "ci_hi"])
        for g in CURVE_GRID:
            value = stats[_curve_key(g)]
            if math.isnan(value):
                continue
            lo, hi = ("", "")
            if intervals is not None:
                lo, hi = (_fmt(v) for v in intervals[_curve_key(g)])
            writer.writerow([f"{g:.2f}", _fmt(value), lo, hi])


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _write_support(path, fit):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "treated", "untreated", "supported"])
        if fit.support is not None:
            for lo, hi, t, u, ok in fit.support.as_rows():
                writer.writerow([f"{lo:.2f}", f"{hi:.2f}", t, u, int(ok)])


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _versions():
    return {"mhselect": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__}


# --- commands ---------------------------------------------------------------

def _require_seed(args, why):
    if args.seed is None:
        raise StageError("config", f"--seed is required {why}")
    if not 0 <= args.seed < 2**63:
        raise StageError("config", "--seed must be a non-negative 64-bit integer")


def cmd_simulate(args) -> None:
    _require_seed(args, "for simulate")
    try:
        config = load_dgp(args.config)
    except ConfigError as exc:
        raise StageError("config", str(exc)) from None
    config = config.with_seed(args.seed)
    try:
        panel, oracle = simulate_roy(config)
        frame, premiums = export_pipeline(panel)
    except ValueError as exc:
        raise StageError("simulate", str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "panel.csv", index=False, lineterminator="\n")
    market.write_premium_csv(premiums, out / "premiums.csv")
    text = dump_dgp(config)
    (out / "dgp.cfg").write_text(text, encoding="utf-8")
    means = config.covariate_means
    _write_json(out / "oracle.json", {
        "schema_version": SCHEMA_VERSION,
        "oracle": oracle.to_dict(),
        "covariate_names": list(config.covariate_names),
        "population_means": means.tolist(),
        "mte_at_population_means": {percentile_key(u): true_mte(oracle, means, u) for u in PERCENTILES},
        "ate_at_population_means": oracle.ate(means),
        "metadata": {"seed": args.seed, "config_hash": config_hash(text), "versions": _versions()},
    })
    print(f"wrote {len(frame)} panel rows and oracle to {out}")


def _run_settings(args) -> RunSettings:
    settings = RunSettings()
    if args.config:
        try:
            settings = load_run_settings(args.config)
        except ConfigError as exc:
            raise StageError("config", str(exc)) from None
    return settings


def _pick(flag, setting, default):
    return flag if flag is not None else (setting if setting is not None else default)


def cmd_estimate(args) -> None:
    settings = _run_settings(args)
    treatment = _pick(args.treatment, settings.treatment, "lowest")
    estimator = _pick(args.estimator, settings.estimator, "normal")
    reps = _pick(args.reps, settings.reps, 0)
    bandwidth = _pick(args.bandwidth, settings.bandwidth, None)
    degree = _pick(args.degree, settings.degree, None)
    stable_only = bool(args.stable_only or settings.stable_only)
    stratum = _pick(args.stratum, settings.stratum, None)
    panel_path = _pick(args.panel, settings.panel, None)
    premium_path = _pick(args.premiums, settings.premiums, None)
    if panel_path is None or premium_path is None:
        raise StageError("config", "both --panel and --premiums are required")
    if reps < 0:
        raise StageError("config", "--reps must be non-negative")
    if reps:
        _require_seed(args, "when bootstrapping (--reps > 0)")
    seed = args.seed if args.seed is not None else 0

    try:
        premiums = market.ingest_premium_csv(premium_path)
    except (market.MarketDataError, OSError) as exc:
        raise StageError("premiums", str(exc)) from None
    try:
        sample = pipeline.build_sample(panel_path, premiums, treatment, stable_only, stratum)
    except (pipeline.PipelineError, ValueError, OSError) as exc:
        raise StageError("pipeline", str(exc)) from None
    try:
        fit, stats, intervals, failed = estimate_with_bootstrap(
            sample.data, estimator, reps, seed, bandwidth, degree, n_jobs=args.jobs)
    except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
        raise StageError("estimate", str(exc)) from None

    run_text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    metadata = {
        "command": "estimate",
        "treatment": treatment,
        "estimator": estimator,
        "reps": reps,
        "seed": seed,
        "stable_only": stable_only,
        "stratum": stratum,
        "bandwidth": bandwidth,
        "degree": degree,
        "config_hash": config_hash(run_text) if run_text else None,
        "versions": _versions(),
    }
    sample_info = {
        "stages": sample.ledger.summary(),
        "covariates": list(sample.data.covariate_names),
        "dropped_covariates": [{"name": n, "reason": r} for n, r in sample.dropped_covariates],
        "intensive_margin_exclusion_rate": sample.extensive_exclusion_rate,
    }
    report = build_report(fit, stats, intervals, failed, reps, metadata, sample_info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    _write_curve(out / "mte_curve.csv", fit, stats, intervals)
    _write_support(out / "support.csv", fit)
    sample.ledger.dropped_frame().to_csv(out / "dropped_rows.csv", index=False, lineterminator="\n")
    print(report_table([report], [f"{estimator}/{treatment}"]))


# --- Monte Carlo ------------------------------------------------------------

@dataclass(frozen=True)
class _Target:
    name: str
    u: float | None


def _targets(percentiles=PERCENTILES):
    return [_Target(percentile_key(u), u) for u in percentiles] + [_Target("ate", None)]


def mc_study(config, replicates, estimators=("normal", "semipar"), reps=0, seed=None,
             bandwidth=None, degree=None, n_jobs=1) -> pd.DataFrame:
    """Per-replicate estimates against the oracle.

    Replicate ``r`` simulates with seed ``seed + r`` (``seed`` defaults to the
    config seed) and bootstraps with the same derived seed.  The oracle is
    evaluated at each replicate's sample covariate means, the point where the
    estimators report.  Failed fits appear as rows with ``ok = False``.

    Raises
    ------
    EstimationError
        When more than half of the fits of an estimator fail.
    """
    if replicates < 1:
        raise ValueError("replicate count must be at least 1")
    base = config.seed if seed is None else int(seed)
    rows = []
    for r in range(replicates):
        rep_seed = base + r
        panel, oracle = simulate_roy(config.with_seed(rep_seed))
        data = panel.to_mte_data()
        x_bar = data.covariates.mean(axis=0)
        for est in estimators:
            try:
                fit, stats, intervals, _ = estimate_with_bootstrap(
                    data, est, reps, rep_seed, bandwidth, degree, n_jobs)
                ok = True
            except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
                log.warning("replicate %d (%s) failed: %s", r, est, exc)
                ok, stats, intervals = False, {}, None
            for t in _targets():
                truth = oracle.ate(x_bar) if t.u is None else true_mte(oracle, x_bar, t.u)
                est_value = stats.get(t.name, np.nan)
                lo, hi = intervals.get(t.name, (np.nan, np.nan)) if intervals else (np.nan, np.nan)
                rows.append({"replicate": r, "seed": rep_seed, "estimator": est, "statistic": t.name,
                             "truth": truth, "estimate": est_value, "ci_lo": lo, "ci_hi": hi,
                             "ok": ok})
            if est == "normal":
                rows.append({"replicate": r, "seed": rep_seed, "estimator": est,
                             "statistic": "cov_gap", "truth": oracle.cov_gap,
                             "estimate": stats.get("cov_gap", np.nan),
                             "ci_lo": intervals.get("cov_gap", (np.nan,))[0] if intervals else np.nan,
                             "ci_hi": intervals.get("cov_gap", (np.nan, np.nan))[1] if intervals else np.nan,
                             "ok": ok})
    frame = pd.DataFrame(rows)
    for est in estimators:
        failed = (~frame.loc[frame["estimator"] == est].groupby("replicate")["ok"].all()).sum()
        if failed > 0.5 * replicates:
            raise EstimationError(f"{failed} of {replicates} {est} replicates failed")
    return frame


def summarise_mc(frame: pd.DataFrame) -> pd.DataFrame:
    """Bias, RMSE and CI coverage per estimator and statistic.

    Statistics with no finite estimate in a replicate (e.g. outside the
    semiparametric support) are excluded from that statistic's averages;
    coverage is NaN without bootstrap intervals.
    """
    out = []
    for (est, stat), g in frame.groupby(["estimator", "statistic"], sort=False):
        err = (g["estimate"] - g["truth"]).to_numpy(float)
        finite = np.isfinite(err)
        has_ci = np.isfinite(g["ci_lo"].to_numpy(float)) & np.isfinite(g["ci_hi"].to_numpy(float))
        covered = (g["ci_lo"] <= g["truth"]) & (g["truth"] <= g["ci_hi"])
        out.append({
            "estimator": est,
            "statistic": stat,
            "n_ok": int(finite.sum()),
            "n_failed": int((~g["ok"]).sum()),
            "mean_truth": float(g["truth"].mean()),
            "mean_estimate": float(np.mean(g["estimate"].to_numpy(float)[finite])) if finite.any() else np.nan,
            "bias": float(err[finite].mean()) if finite.any() else np.nan,
            "rmse": float(np.sqrt(np.mean(err[finite] ** 2))) if finite.any() else np.nan,
            "coverage": float(covered[has_ci].mean()) if has_ci.any() else np.nan,
            "n_ci": int(has_ci.sum()),
        })
    return pd.DataFrame(out)


def cmd_mc_study(args) -> None:
    _require_seed(args, "for mc-study")
    try:
        config = load_dgp(args.config)
        settings = load_run_settings(args.config)
    except ConfigError as exc:
        raise StageError("config", str(exc)) from None
    replicates = _pick(args.replicates, settings.replicates, 10)
    reps = _pick(args.reps, settings.reps, 0)
    estimators = (args.estimator,) if args.estimator else (
        (settings.estimator,) if settings.estimator else ("normal", "semipar"))
    try:
        frame = mc_study(config, replicates, estimators, reps, args.seed,
                         _pick(args.bandwidth, settings.bandwidth, None),
                         _pick(args.degree, settings.degree, None), n_jobs=args.jobs)
    except (EstimationError, ValueError) as exc:
        raise StageError("mc-study", str(exc)) from None
    summary = summarise_mc(frame)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "mc_replicates.csv", index=False, lineterminator="\n")
    summary.to_csv(out / "mc_summary.csv", index=False, lineterminator="\n")
    print(summary.to_string(index=False))


# --- report -----------------------------------------------------------------

def _cell(entry) -> str:
    if entry is None or entry.get("estimate") is None:
        return "."
    text = f"{entry['estimate']:.3f}"
    if entry.get("ci_lo") is not None and entry.get("ci_hi") is not None:
        text += f" [{entry['ci_lo']:.3f}, {entry['ci_hi']:.3f}]"
    return text


def report_table(bundles, labels=None) -> str:
    """Side-by-side percentile table; ``.`` marks absent (out-of-support) cells."""
    labels = labels or [f"{b['estimator']}/{b['metadata'].get('treatment', '?')}" for b in bundles]
    grid = sorted({e["u"] for b in bundles for e in b["percentiles"]})
    rows = [["U_D", *labels]]
    for u in grid:
        cells = []
        for b in bundles:
            entry = next((e for e in b["percentiles"] if e["u"] == u), None)
            cells.append(_cell(entry))
        rows.append([f"MTE p{int(round(u * 100))}", *cells])
    rows.append(["ATE", *[_cell(b["ate"]) for b in bundles]])
    names = sorted({f["name"] for b in bundles for f in b["first_stage"]})
    for name in names:
        cells = []
        for b in bundles:
            entry = next((f for f in b["first_stage"] if f["name"] == name), None)
            cells.append(_cell({"estimate": entry["coef"], **{k: entry.get(k) for k in ("ci_lo", "ci_hi")}})
                         if entry else ".")
        rows.append([f"first stage: {name}", *cells])
    rows.append(["N", *[str(b["n"]) for b in bundles]])
    rows.append(["bootstrap reps", *[str(b["bootstrap"]["reps"]) for b in bundles]])
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _load_bundle(path):
    try:
        with open(path, encoding="utf-8") as fh:
            bundle = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("report", f"cannot read bundle {path}: {exc}") from None
    version = bundle.get("schema_version") if isinstance(bundle, dict) else None
    if version != SCHEMA_VERSION:
        raise StageError("report", f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}")
    return bundle


def cmd_report(args) -> None:
    bundles = [_load_bundle(p) for p in args.bundles]
    labels = [Path(p).parent.name or Path(p).stem for p in args.bundles]
    if len(set(labels)) < len(labels):
        labels = None
    text = report_table(bundles, labels)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report_table.txt").write_text(text + "\n", encoding="utf-8")
        cols = labels or [f"{b['estimator']}/{b['metadata'].get('treatment', '?')}" for b in bundles]
        with open(out / "report_table.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["u", *[f"{c}_{k}" for c in cols for k in ("estimate", "ci_lo", "ci_hi")]])
            grid = sorted({e["u"] for b in bundles for e in b["percentiles"]})
            for u in grid:
                row = [u]
                for b in bundles:
                    e = next((e for e in b["percentiles"] if e["u"] == u), {}) or {}
                    row += [_fmt(e.get(k)) for k in ("estimate", "ci_lo", "ci_hi")]
                writer.writerow(row)


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhselect", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required):
        p.add_argument("--config", required=config_required, help="config file")
        p.add_argument("--seed", type=int, help="random seed (required for stochastic runs)")
        p.add_argument("--out", required=True, help="output directory")

    def estimation(p):
        p.add_argument("--estimator", choices=sorted(ESTIMATORS))
        p.add_argument("--reps", type=int, help="bootstrap replications (0 = none)")
        p.add_argument("--bandwidth", type=float, help="semiparametric bandwidth")
        p.add_argument("--degree", type=int, help="semiparametric local polynomial degree")
        p.add_argument("--jobs", type=int, default=1, help="parallel bootstrap workers")

    p = sub.add_parser("simulate", help="simulate a Roy panel with its oracle")
    common(p, True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate MTEs on a panel")
    common(p, False)
    estimation(p)
    p.add_argument("--panel", help="panel CSV")
    p.add_argument("--premiums", help="premium CSV")
    p.add_argument("--treatment", choices=("lowest", "highest"))
    p.add_argument("--stable-only", action="store_true", help="restrict to persons unchanged over the last two waves")
    p.add_argument("--stratum", help="DIMENSION=BAND, e.g. household_size_band=3+")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("mc-study", help="Monte Carlo bias/RMSE/coverage study")
    common(p, True)
    estimation(p)
    p.add_argument("--replicates", type=int, help="number of simulated panels")
    p.set_defaults(func=cmd_mc_study)

    p = sub.add_parser("report", help="side-by-side table of report bundles")
    p.add_argument("bundles", nargs="+", help="report.json files")
    p.add_argument("--out", help="directory for report_table.txt/.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
