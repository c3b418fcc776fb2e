"""Command-line entry point: ``msmsim {validate,simulate,oracle,study,estimate}``.

Exit codes: 0 ok, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import pandas as pd

from ..dists import ConfigurationError
from ..estimate import EstimationError, fit_msm, prepare_msm_data
from ..expr import ExpressionError, parse_expression
from ..scenario import regime_from_text
from .config import ConfigError, StudyConfig, load_config
from .io import read_frame, write_frame, write_manifest
from .oracle import run_oracle_margin
from .simulate import run_simulate
from .study import msm_terms, run_replication_study

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _overrides(config: StudyConfig, pairs) -> dict:
    out = {}
    known = dict(config.params)
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--param {pair!r}: expected NAME=value")
        name, text = (s.strip() for s in pair.split("=", 1))
        if name not in known:
            raise ConfigError(f"--param {name!r}: not declared in [params]")
        try:
            lp = parse_expression(text, known)
        except ExpressionError as exc:
            raise ConfigError(f"--param {name}: {exc}") from None
        if not lp.is_constant:
            raise ConfigError(f"--param {name}: value must be a constant")
        out[name] = lp.intercept
    return out


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    scen = cfg.scenario
    print(
        f"ok: {cfg.kind} scenario, K={cfg.K}, baseline={scen.baseline_names}, covariates={scen.covariate_names}, "
        f"treatments={scen.treatment_names}, cells={len(cfg.cells())}, hash={cfg.scenario_hash()[:12]}"
    )
    if args.canonical:
        print(cfg.canonical_text(), end="")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    fields = run_simulate(
        cfg, args.out, n=args.n, replications=args.replications, seed=args.seed, overrides=_overrides(cfg, args.param)
    )
    print(f"wrote {', '.join(fields['files'])} to {args.out} (aborts: {fields['aborts']['total']})")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    scen = cfg.scenario_for(_overrides(cfg, args.param))
    regimes = [regime_from_text(r) for r in args.regime]
    if not regimes:
        raise ConfigError("oracle: give at least one --regime, e.g. --regime 'A=1'")
    missing = [t for t in scen.treatment_names if any(t not in r for r in regimes)]
    if missing:
        raise ConfigError(f"oracle: regimes must fix every treatment; missing {missing}")
    seed = cfg.seed if args.seed is None else args.seed
    report = run_oracle_margin(scen, regimes, args.n or cfg.oracle_n, seed, min_survivors=cfg.min_survivors)
    out = Path(args.out)
    write_frame(report, out / "oracle_report.csv")
    write_manifest(out / "manifest.json", command="oracle", config=cfg.source, scenario_hash=cfg.scenario_hash(),
                   seed=seed, regimes=args.regime, passed=int(report["passed"].sum()), checks=len(report))
    print(f"{int(report['passed'].sum())}/{len(report)} strata passed; report in {out / 'oracle_report.csv'}")
    return EXIT_OK


def _cmd_study(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = _with_seed(cfg, args.seed)
    summary = run_replication_study(cfg, args.out, threads=args.threads, replications=args.replications)
    with pd.option_context("display.width", 200, "display.max_columns", 30):
        print(summary[["cell", "n", "estimator", "coefficient", "bias", "mc_se", "coverage", "power", "replications"]]
              .to_string(index=False))
    return EXIT_OK


def _cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    overrides = _overrides(cfg, args.param)
    scen = cfg.scenario_for(overrides)
    terms = msm_terms(cfg, overrides)
    pp = read_frame(args.data)
    outcomes = read_frame(args.outcomes) if args.outcomes else None
    if scen.kind == "terminal" and outcomes is None:
        sibling = Path(args.data).with_name("outcomes.csv")
        if not sibling.exists():
            raise ConfigError("estimate: terminal scenarios need --outcomes (or outcomes.csv next to the data)")
        outcomes = read_frame(sibling)
    rows = []
    for rep, part in pp.groupby("rep", sort=True):
        oc = None if outcomes is None else outcomes[outcomes["rep"] == rep]
        data = prepare_msm_data(scen, part, oc, terms)
        for est in cfg.estimators:
            fit = fit_msm(scen, data, cfg.weight_models, weighted=est == "iptw", pooled=cfg.weights_mode == "pooled")
            for j, name in enumerate(fit.names):
                rows.append({
                    "rep": rep, "estimator": est, "coefficient": name, "estimate": fit.coef[j],
                    "se": fit.se[j] if fit.se is not None else float("nan"), "truth": data.design.truth[j],
                    "converged": fit.converged,
                })
    table = pd.DataFrame(rows)
    if args.out:
        write_frame(table, Path(args.out) / "estimates.csv")
    print(table.to_string(index=False))
    return EXIT_OK


def _with_seed(cfg: StudyConfig, seed: int) -> StudyConfig:
    from dataclasses import replace

    sections = tuple(
        (sec, tuple((k, str(seed) if (sec == "study" and k == "seed") else v) for k, v in items))
        for sec, items in cfg.sections
    )
    if "seed" not in dict(dict(sections)["study"]):
        sections = tuple((s, items + (("seed", str(seed)),) if s == "study" else items) for s, items in sections)
    return replace(cfg, seed=seed, sections=sections)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msmsim", description="Simulate longitudinal data from marginal structural models.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data_out=True):
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--threads", type=int, default=1, help="worker processes for replications")
        p.add_argument("--param", action="append", metavar="NAME=VALUE", help="override a [params] value")
        if data_out:
            p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("validate", help="parse and validate a scenario file")
    p.add_argument("config")
    p.add_argument("--canonical", action="store_true", help="print the canonical re-serialization")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("simulate", help="write simulated datasets")
    p.add_argument("config")
    p.add_argument("--n", type=int, help="individuals per replication (default: first [study] n)")
    p.add_argument("--replications", type=int)
    common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("oracle", help="check simulated outcomes against the analytical MSM margin")
    p.add_argument("config")
    p.add_argument("--regime", action="append", default=[], help="fixed treatments, e.g. 'A=1' or 'A=1;S=0,0,1,1,1,1,1'")
    p.add_argument("--n", type=int)
    common(p)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("study", help="run a replication study and write summary tables")
    p.add_argument("config")
    p.add_argument("--replications", type=int)
    common(p)
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("estimate", help="fit the MSM (IPTW and unweighted) to a person-period CSV")
    p.add_argument("data")
    p.add_argument("config")
    p.add_argument("--outcomes", help="outcome table for terminal scenarios")
    common(p, data_out=False)
    p.add_argument("--out", help="directory for estimates.csv")
    p.set_defaults(func=_cmd_estimate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, ExpressionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
