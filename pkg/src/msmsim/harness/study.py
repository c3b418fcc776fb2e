"""Replication studies: simulate, weight, fit, and summarize bias, Monte Carlo
SE, coverage and power per (grid cell, n, estimator, coefficient)."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from ..dists import ConfigurationError
from ..estimate import (
    EstimationError, bootstrap_ci, fit_msm, msm_design, msm_estimator, prepare_msm_data,
)
from ..expr import ExpressionError, parse_expression
from ..rng import derived_seed
from .config import StudyConfig
from .io import write_frame, write_manifest
from .simulate import simulate_frames

RECORD_COLUMNS = [
    "cell", "n", "rep", "estimator", "coefficient", "truth", "estimate", "se", "ci_low", "ci_high", "boot_low",
    "boot_high", "boot_drop_rate", "covered", "boot_covered", "reject", "converged", "aborts", "weight_mean",
    "weight_max", "message",
]


def msm_terms(config: StudyConfig, overrides: dict | None = None) -> tuple:
    """Regression terms shared by every grid cell: the union of each cell's MSM terms, in first-seen order.

    A parameter set to zero in one cell removes its term from that cell's MSM;
    the union keeps it in the regression, where its true value is then 0.
    """
    terms: list = []
    scenarios = [config.scenario_for(o) for o, _ in config.cells()]
    if overrides:
        scenarios.append(config.scenario_for(overrides))
    for scen in scenarios:
        for m in msm_design(scen).monomials:
            if m not in terms:
                terms.append(m)
    return tuple(terms)


def target_indices(config: StudyConfig, design) -> list:
    """Positions of the reported coefficients in the MSM design (all non-intercept terms by default)."""
    if not config.targets:
        return list(range(1, len(design.names)))
    out = []
    for t in config.targets:
        if t in ("(Intercept)", "1"):
            out.append(0)
            continue
        try:
            lp = parse_expression(t, dict(config.params))
        except ExpressionError as exc:
            raise ConfigurationError(f"[study] targets: {exc}") from None
        if lp.intercept != 0 or len(lp.terms) != 1 or lp.terms[0][1] != 1.0:
            raise ConfigurationError(f"[study] targets: {t!r} must name a single model term")
        mono = lp.terms[0][0]
        if mono not in design.monomials:
            raise ConfigurationError(f"[study] targets: {t!r} is not a term of the MSM")
        out.append(1 + design.monomials.index(mono))
    return out


def _critical(config: StudyConfig):
    level_z = stats.norm.ppf(0.5 + config.level / 2)
    if config.power == "two-sided":
        return level_z, stats.norm.ppf(1 - config.alpha / 2)
    return level_z, stats.norm.ppf(1 - config.alpha)


def _rejects(config: StudyConfig, est, se, crit) -> bool:
    if not (np.isfinite(est) and np.isfinite(se) and se > 0):
        return False
    z = est / se
    if config.power == "two-sided":
        return bool(abs(z) > crit)
    if config.power == "one-sided-lower":
        return bool(z < -crit)
    return bool(z > crit)


def run_replication(config: StudyConfig, cell: int, overrides: dict, n: int, rep: int) -> list:
    """All estimator records for one replication of one cell."""
    scen = config.scenario_for(overrides)
    terms = msm_terms(config)
    design = msm_design(scen, terms)
    targets = target_indices(config, design)
    pp, outcomes, aborts = simulate_frames(scen, n, derived_seed(config.seed, cell), rep)
    data = prepare_msm_data(scen, pp, outcomes, terms)
    z_level, z_power = _critical(config)
    records = []
    for e_idx, estimator in enumerate(config.estimators):
        weighted = estimator == "iptw"
        pooled = config.weights_mode == "pooled"
        try:
            fit = fit_msm(scen, data, config.weight_models, weighted, pooled)
            msg = fit.message
        except EstimationError as exc:
            fit, msg = None, str(exc)
        boot = None
        if fit is not None and fit.converged and "bootstrap" in config.ci:
            frame = data.frame
            if scen.kind == "terminal":
                frame = frame.merge(outcomes[["id", "y"]], on="id", how="left")
            boot = bootstrap_ci(
                frame, msm_estimator(scen, config.weight_models, weighted, pooled, terms), config.bootstrap,
                derived_seed(config.seed, cell, rep, e_idx), config.level,
            )
        for j in targets:
            truth = design.truth[j]
            ok = fit is not None and fit.converged
            est = fit.coef[j] if ok else np.nan
            se = fit.se[j] if ok and fit.se is not None else np.nan
            lo, hi = est - z_level * se, est + z_level * se
            b_lo = boot.ci_low[j] if boot is not None else np.nan
            b_hi = boot.ci_high[j] if boot is not None else np.nan
            records.append({
                "cell": cell, "n": n, "rep": rep, "estimator": estimator, "coefficient": design.names[j],
                "truth": truth, "estimate": est, "se": se, "ci_low": lo, "ci_high": hi, "boot_low": b_lo,
                "boot_high": b_hi, "boot_drop_rate": boot.drop_rate if boot is not None else np.nan,
                "covered": bool(lo <= truth <= hi) if np.isfinite(se) else np.nan,
                "boot_covered": bool(b_lo <= truth <= b_hi) if boot is not None else np.nan,
                "reject": _rejects(config, est, se, z_power) if ok else np.nan,
                "converged": ok, "aborts": aborts,
                "weight_mean": fit.weight_summary["mean"] if fit is not None and fit.weight_summary else np.nan,
                "weight_max": fit.weight_summary["max"] if fit is not None and fit.weight_summary else np.nan,
                "message": msg,
            })
    return records


def _task(args):
    return run_replication(*args)


def replication_tasks(config: StudyConfig, replications: int | None = None) -> list:
    reps = config.replications if replications is None else replications
    return [
        (config, cell, overrides, n, rep)
        for cell, (overrides, n) in enumerate(config.cells())
        for rep in range(reps)
    ]


def run_replications(config: StudyConfig, threads: int = 1, replications: int | None = None) -> pd.DataFrame:
    """Per-replication records in deterministic (cell, rep, estimator, coefficient) order."""
    tasks = replication_tasks(config, replications)
    if threads <= 1:
        results = [_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * threads))))
    frame = pd.DataFrame([r for rs in results for r in rs], columns=RECORD_COLUMNS)
    for col in ("covered", "boot_covered", "reject"):
        frame[col] = frame[col].astype(float)
    return frame


def summarize(config: StudyConfig, records: pd.DataFrame) -> pd.DataFrame:
    """One row per (cell, n, estimator, coefficient)."""
    cells = config.cells()
    grid_names = [g for g, _ in config.grid]
    rows = []
    keys = ["cell", "n", "estimator", "coefficient"]
    order = {e: i for i, e in enumerate(config.estimators)}
    for (cell, n, est, coef), g in records.groupby(keys, sort=False):
        ok = g[g["converged"].astype(bool)]
        reps = len(ok)
        mc_se = float(ok["estimate"].std(ddof=1)) if reps > 1 else np.nan
        row = {"cell": cell}
        row.update({name: cells[cell][0].get(name) for name in grid_names})
        row.update({
            "n": n, "estimator": est, "coefficient": coef, "truth": g["truth"].iloc[0],
            "mean_estimate": float(ok["estimate"].mean()) if reps else np.nan,
            "bias": float(ok["estimate"].mean() - g["truth"].iloc[0]) if reps else np.nan,
            "mc_se": mc_se, "mc_se_defined": reps > 1,
            "mean_se": float(ok["se"].mean()) if reps else np.nan,
            "coverage": float(ok["covered"].mean()) if ok["covered"].notna().any() else np.nan,
            "boot_coverage": float(ok["boot_covered"].mean()) if ok["boot_covered"].notna().any() else np.nan,
            "power": float(ok["reject"].mean()) if ok["reject"].notna().any() else np.nan,
            "replications": reps, "failures": int(len(g) - reps), "failure_rate": float((len(g) - reps) / len(g)),
            "aborts": int(g.drop_duplicates("rep")["aborts"].sum()),
            "mean_weight": float(ok["weight_mean"].mean()) if reps else np.nan,
            "max_weight": float(ok["weight_max"].max()) if reps else np.nan,
            "_order": order[est],
        })
        rows.append(row)
    out = pd.DataFrame(rows)
    if out.empty:
        return out
    return out.sort_values(["cell", "_order"], kind="stable").drop(columns="_order").reset_index(drop=True)


def run_replication_study(
    config: StudyConfig, out=None, threads: int = 1, replications: int | None = None
) -> pd.DataFrame:
    """Run every grid cell; write ``replications.csv``, ``summary.csv`` and a manifest when ``out`` is given."""
    records = run_replications(config, threads, replications)
    summary = summarize(config, records)
    if out is not None:
        out = Path(out)
        write_frame(records, out / "replications.csv")
        write_frame(summary, out / "summary.csv")
        write_manifest(
            out / "manifest.json", command="study", config=config.source, scenario_hash=config.scenario_hash(),
            seed=config.seed, replications=replications or config.replications, cells=len(config.cells()),
            aborts={"total": int(records.drop_duplicates(["cell", "rep"])["aborts"].sum())},
            estimator_failures=int((~records["converged"].astype(bool)).sum()),
        )
    return summary
