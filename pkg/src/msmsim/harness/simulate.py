"""Dataset emission: simulate replications of a configured scenario to CSV."""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path

import pandas as pd

from ..frugal import simulate_population
from ..survival import simulate_survival
from .config import StudyConfig
from .io import file_digest, write_frame, write_manifest


def simulate_frames(scen, n: int, seed: int, rep: int) -> tuple:
    """(person-period frame, outcome frame or None, abort count) for one replication."""
    if scen.kind == "terminal":
        data = simulate_population(scen, n, seed, rep)
        return data.person_period_frame(), data.outcome_frame(), 0
    data = simulate_survival(scen, n, seed, rep)
    return data.frame(), None, int(data.aborted.sum())


def run_simulate(
    config: StudyConfig, out, n: int | None = None, replications: int | None = None, seed: int | None = None,
    overrides: Mapping | None = None,
) -> dict:
    """Write ``person_period.csv`` (plus ``outcomes.csv`` for terminal outcomes) and ``manifest.json``.

    All replications go in one file with a ``rep`` column.  Returns the manifest fields.
    """
    out = Path(out)
    scen = config.scenario_for(overrides)
    n = n if n is not None else config.n[0]
    reps = replications if replications is not None else config.replications
    seed = config.seed if seed is None else seed
    pps, outs, aborts = [], [], []
    for rep in range(reps):
        pp, oc, ab = simulate_frames(scen, n, seed, rep)
        pps.append(pp)
        if oc is not None:
            outs.append(oc)
        aborts.append(ab)
    files = {"person_period.csv": write_frame(pd.concat(pps, ignore_index=True), out / "person_period.csv")}
    if outs:
        files["outcomes.csv"] = write_frame(pd.concat(outs, ignore_index=True), out / "outcomes.csv")
    fields = {
        "command": "simulate", "config": config.source, "scenario_hash": config.scenario_hash(overrides),
        "seed": seed, "n": n, "replications": reps, "overrides": dict(overrides or {}),
        "aborts": {"total": int(sum(aborts)), "per_replication": aborts},
        "files": {name: file_digest(p) for name, p in files.items()},
    }
    write_manifest(out / "manifest.json", **fields)
    return fields
