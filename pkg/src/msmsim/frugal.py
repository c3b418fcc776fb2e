"""Terminal-outcome simulation: sequential covariate/treatment draws, then the
outcome from its causal margin by unweaving the pair-copula chain.

The outcome's conditional quantile given the whole covariate path is a fresh
uniform ``w_Y``.  Applying inverse h-functions against each covariate draw, in
reverse generation order, strips the conditioning and leaves the marginal
quantile ``u_star``; the outcome is then ``F*^-1(u_star | do(a), z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .copulas import clamp, h_inv
from .dists import ConfigurationError, quantile
from .rng import uniform_block
from .scenario import History, ScenarioSpec, new_history


class UniformStream:
    """Column access into a per-individual uniform block according to a scenario layout."""

    def __init__(self, block: np.ndarray, layout: dict):
        self.block = block
        self.layout = layout

    def take(self, key, rows=None) -> np.ndarray:
        col = self.block[:, self.layout[key]]
        return col if rows is None else col[rows]


@dataclass
class Trajectory:
    """One individual's simulated path."""

    z: dict
    covariates: dict  # name -> array of K+1 values (latent processes included)
    treatments: dict
    u_star: float
    y: float
    draws: np.ndarray | None = None  # full uniform vector when traced


@dataclass
class TerminalData:
    scenario: ScenarioSpec
    ids: np.ndarray
    rep: int
    history: History
    covariate_draws: dict  # name -> (n, K+1) uniforms w_{k,1}
    u_star: np.ndarray
    y: np.ndarray
    draws: np.ndarray | None = None
    aborted: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.ids.size

    def person_period_frame(self, include_latent: bool = False) -> pd.DataFrame:
        scen, n, K = self.scenario, self.n, self.scenario.K
        cols = {"id": np.repeat(self.ids, K + 1), "rep": np.full(n * (K + 1), self.rep, dtype=np.int64)}
        for name in scen.baseline_names:
            cols[name] = np.repeat(self.history.base[name], K + 1)
        cols["k"] = np.tile(np.arange(K + 1), n)
        for p in scen.processes:
            if p.latent and not include_latent:
                continue
            cols[p.name] = self.history.proc[p.name].reshape(-1)
        return pd.DataFrame(cols)

    def outcome_frame(self) -> pd.DataFrame:
        cols = {"id": self.ids, "rep": np.full(self.n, self.rep, dtype=np.int64)}
        for name in self.scenario.baseline_names:
            cols[name] = self.history.base[name]
        cols["y"] = self.y
        cols["u_star"] = self.u_star
        return pd.DataFrame(cols)

    def trajectory(self, i: int) -> Trajectory:
        h = self.history
        return Trajectory(
            z={n: float(h.base[n][i]) for n in self.scenario.baseline_names},
            covariates={p.name: h.proc[p.name][i].copy() for p in self.scenario.covariates},
            treatments={p.name: h.proc[p.name][i].copy() for p in self.scenario.treatments},
            u_star=float(self.u_star[i]),
            y=float(self.y[i]),
            draws=None if self.draws is None else self.draws[i].copy(),
        )


def simulate_baseline(spec: ScenarioSpec, stream: UniformStream, history: History) -> dict:
    """Draw step-0 values of covariates that precede the baseline block, then the baseline block."""
    drawn = {}
    h0 = history.at(0)
    for p in spec.covariates:
        if p.precedes_baseline:
            w = stream.take((0, p.name))
            history.proc[p.name][:, 0] = quantile(p.at(0), h0, w, step=0)
            drawn[p.name] = w
    for name, law in spec.baseline:
        w = stream.take(("base", name))
        history.base[name] = np.asarray(quantile(law, h0, w), dtype=float)
    return drawn


def simulate_step(spec: ScenarioSpec, k: int, history: History, stream: UniformStream, rows=None) -> dict:
    """Draw covariates then treatments at step k; returns the covariate uniforms w_{k,1}."""
    if not 0 <= k <= spec.K:
        raise ConfigurationError(f"step {k} outside 0..{spec.K}")
    hk = history.at(k, rows)
    sel = slice(None) if rows is None else rows
    kept = {}
    for p in spec.covariates:
        if k == 0 and p.precedes_baseline:
            continue
        w = stream.take((k, p.name), rows)
        history.proc[p.name][sel, k] = quantile(p.at(k), hk, w, step=k)
        kept[p.name] = w
    for p in spec.treatments:
        w = stream.take((k, p.name), rows)
        history.proc[p.name][sel, k] = quantile(p.at(k), hk, w, step=k)
    return kept


def unweave_outcome(spec: ScenarioSpec, covariate_draws: dict, w_y) -> np.ndarray:
    """Marginal outcome quantile from the conditional one.

    ``covariate_draws[name]`` holds the K+1 uniforms of that process (last axis).
    Inverse h-functions run from step K down to 0 and, within a step, over the
    covariate processes in reverse declaration order.  Treatment draws never
    enter.
    """
    u = np.asarray(w_y, dtype=float)
    for k in range(spec.K, -1, -1):
        for p in reversed(spec.covariates):
            cop = spec.copula_matrix(p.name).get(spec.K, k)
            if cop.is_independence:
                continue
            v = np.asarray(covariate_draws[p.name])[..., k]
            u = h_inv(cop, clamp(u), clamp(v))
    return u


def simulate_population(
    spec: ScenarioSpec, n: int, seed: int, rep: int = 0, ids=None, trace: bool = False
) -> TerminalData:
    """Simulate ``n`` individuals (ids 0..n-1 unless given) under a terminal scenario."""
    if spec.kind != "terminal":
        raise ConfigurationError("simulate_population needs a terminal scenario")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    layout = spec.layout
    block = uniform_block(seed, rep, ids, len(layout))
    stream = UniformStream(block, layout)
    hist = new_history(spec, ids.size)
    cov_draws = {p.name: np.empty((ids.size, spec.K + 1)) for p in spec.covariates}
    for name, w in simulate_baseline(spec, stream, hist).items():
        cov_draws[name][:, 0] = w
    for k in range(spec.K + 1):
        for name, w in simulate_step(spec, k, hist, stream).items():
            cov_draws[name][:, k] = w
    w_y = stream.take(("final", "@outcome"))
    u_star = unweave_outcome(spec, cov_draws, w_y)
    y = np.asarray(quantile(spec.msm.outcome, hist.at(spec.K), u_star, step=spec.K), dtype=float)
    return TerminalData(
        scenario=spec, ids=ids, rep=rep, history=hist, covariate_draws=cov_draws, u_star=np.asarray(u_star),
        y=y, draws=block if trace else None, aborted=np.zeros(ids.size, dtype=bool),
    )


def simulate_individual(spec: ScenarioSpec, seed: int, individual: int = 0, rep: int = 0, trace: bool = False) -> Trajectory:
    """One individual's trajectory; identical to that individual's row in any population run."""
    data = simulate_population(spec, 1, seed, rep, ids=[individual], trace=trace)
    return data.trajectory(0)
