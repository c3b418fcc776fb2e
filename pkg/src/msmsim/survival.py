"""Time-to-event simulation with an exact causal margin per interval.

Per step k, for individuals still at risk:

1. draw covariates and treatments;
2. renormalize each earlier covariate quantile to the surviving population
   with ``(v - C(v, q)) / (1 - q)``;
3. unweave the fresh outcome uniform through inverse h-functions against the
   survivor quantiles (latest draw first) to get the marginal quantile;
4. invert the interval's causal law to get the incremental failure time;
5. for survivors, prepare next step's failure quantiles ``q`` by the
   h-function recursion.

Several covariate processes form one flat chain in generation order:
index ``m = j * p + i`` is process i at step j.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .copulas import CLAMP, CopulaSpec, clamp, copula_cdf, h, h_inv
from .dists import ConfigurationError, quantile
from .frugal import UniformStream, simulate_baseline, simulate_step
from .rng import uniform_block
from .scenario import History, ScenarioSpec, SurvivalMsm, new_history

DEGENERATE = 1.0 - 1e-12

EVENT_NONE, EVENT_OUTCOME, EVENT_COMPETING = 0, 1, 2


class DegenerateSurvivalError(ValueError):
    """Survival probability numerically zero; renormalization would cancel catastrophically."""


def renormalize_survivor_quantile(c: CopulaSpec, v, q, survivors_below: bool = False):
    """Covariate quantile within the subpopulation that survived the interval.

    ``q`` is the conditional probability of failing in the interval.  With
    ``survivors_below`` (latent-threshold outcomes) survivors occupy the lower
    part of the outcome scale and ``q`` is their probability instead.
    """
    v = np.asarray(v, dtype=float)
    q = np.asarray(q, dtype=float)
    if survivors_below:
        if np.any(q <= 1.0 - DEGENERATE):
            raise DegenerateSurvivalError("survival probability below 1e-12")
        out = np.asarray(copula_cdf(c, v, q), dtype=float) / q
    else:
        if np.any(q >= DEGENERATE):
            raise DegenerateSurvivalError("failure probability above 1 - 1e-12")
        out = (v - np.asarray(copula_cdf(c, v, q), dtype=float)) / (1.0 - q)
    out = np.clip(out, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return float(out) if out.ndim == 0 else out


def update_q(c: CopulaSpec, q_prev, v_prev):
    """Failure quantile after also conditioning on one more covariate draw."""
    return h(c, clamp(q_prev), clamp(v_prev))


def unweave_incremental(copula_row, w, v_row):
    """Apply inverse h-functions from the last chain element down to the first."""
    xi = np.asarray(w, dtype=float)
    v_row = np.asarray(v_row, dtype=float)
    for m in range(len(copula_row) - 1, -1, -1):
        c = copula_row[m]
        if not c.is_independence:
            xi = h_inv(c, clamp(xi), clamp(v_row[..., m]))
    return xi


def invert_msm_incremental(msm: SurvivalMsm, u, history, step=None):
    """Marginal quantile -> (incremental failure time or latent value, failure indicator)."""
    return msm.invert(u, history, step)


class EvalCounter:
    """Per-individual, per-step tally of distribution/copula function evaluations."""

    def __init__(self, n: int, K: int):
        self.counts = np.zeros((n, K + 1), dtype=np.int64)
        self.by_kind: dict = {}

    def add(self, kind: str, k: int, rows, times: int = 1):
        self.counts[rows, k] += times
        arr = self.by_kind.setdefault(kind, np.zeros_like(self.counts))
        arr[rows, k] += times


@dataclass
class SurvivorState:
    """Survivor quantiles of covariate draws ``v`` and failure quantiles ``q`` for one outcome process."""

    v: np.ndarray  # (n, (K+1)*p)
    q: np.ndarray
    p: int

    @classmethod
    def empty(cls, n: int, K: int, p: int) -> "SurvivorState":
        return cls(np.full((n, (K + 1) * p), np.nan), np.full((n, (K + 1) * p), np.nan), p)

    def matrix(self, which: str, i: int) -> np.ndarray:
        """(n, K+1) view of process i's entries."""
        arr = self.v if which == "v" else self.q
        return arr[:, i :: self.p]


@dataclass
class SurvivalTrajectory:
    z: dict
    covariates: dict  # name -> values at steps 0..last
    treatments: dict
    ytilde: np.ndarray  # per step
    y: np.ndarray
    event_step: int | None  # step k whose interval ended with an event
    event_type: int
    aborted: bool
    competing_time: np.ndarray | None = None


@dataclass
class SurvivalData:
    scenario: ScenarioSpec
    ids: np.ndarray
    rep: int
    history: History
    at_risk: np.ndarray  # (n, K+1) bool: individual simulated at step k
    ytilde: np.ndarray  # (n, K+1)
    y: np.ndarray  # (n, K+1) failure of the outcome in interval k
    event_type: np.ndarray  # (n, K+1)
    aborted: np.ndarray  # (n,)
    dtilde: np.ndarray | None = None
    state: SurvivorState | None = None
    counter: EvalCounter | None = None
    draws: np.ndarray | None = None
    abort_reasons: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.ids.size

    def frame(self, include_latent: bool = False) -> pd.DataFrame:
        """Long person-period rows: one per individual and step at risk."""
        scen = self.scenario
        ii, kk = np.nonzero(self.at_risk)
        order = np.lexsort((kk, ii))
        ii, kk = ii[order], kk[order]
        cols = {"id": self.ids[ii], "rep": np.full(ii.size, self.rep, dtype=np.int64), "k": kk}
        for name in scen.baseline_names:
            cols[name] = self.history.base[name][ii]
        for p in scen.processes:
            if p.latent and not include_latent:
                continue
            cols[p.name] = self.history.proc[p.name][ii, kk]
        cols["ytilde"] = self.ytilde[ii, kk]
        cols["y"] = self.y[ii, kk].astype(np.int64)
        cols["event_type"] = self.event_type[ii, kk].astype(np.int64)
        if self.dtilde is not None:
            cols["dtilde"] = self.dtilde[ii, kk]
        return pd.DataFrame(cols)

    def trajectory(self, i: int) -> SurvivalTrajectory:
        steps = np.flatnonzero(self.at_risk[i])
        last = steps.max() + 1 if steps.size else 0
        ev = np.flatnonzero(self.event_type[i] > 0)
        h = self.history
        return SurvivalTrajectory(
            z={n: float(h.base[n][i]) for n in self.scenario.baseline_names},
            covariates={p.name: h.proc[p.name][i, :last].copy() for p in self.scenario.covariates},
            treatments={p.name: h.proc[p.name][i, :last].copy() for p in self.scenario.treatments},
            ytilde=self.ytilde[i, :last].copy(),
            y=self.y[i, :last].copy(),
            event_step=int(ev[0]) if ev.size else None,
            event_type=int(self.event_type[i, ev[0]]) if ev.size else EVENT_NONE,
            aborted=bool(self.aborted[i]),
            competing_time=None if self.dtilde is None else self.dtilde[i, :last].copy(),
        )


class _OutcomeProcess:
    """Survivor bookkeeping for one failure process (the outcome, or an MSM-driven competing event)."""

    def __init__(self, scen: ScenarioSpec, msm: SurvivalMsm, matrices: dict, n: int, column: str, counter, count: bool):
        self.scen, self.msm, self.column = scen, msm, column
        self.p = len(scen.covariates)
        self.state = SurvivorState.empty(n, scen.K, self.p)
        self.cops = [
            [matrices[scen.covariates[m % self.p].name].get(k, m // self.p) for m in range((k + 1) * self.p)]
            for k in range(scen.K + 1)
        ]
        self.counter = counter if count else None
        self.below = msm.survivors_below

    def _count(self, kind, k, rows, times=1):
        if self.counter is not None and times:
            self.counter.add(kind, k, rows, times)

    def step(self, k, rows, hk: History, w):
        """Renormalize, unweave, invert.  Returns (value, fail)."""
        st, p = self.state, self.p
        if k > 0:
            for m in range(k * p):
                c = self.cops[k - 1][m]
                if not c.is_independence:
                    st.v[rows, m] = renormalize_survivor_quantile(c, st.v[rows, m], st.q[rows, m], self.below)
            self._count("renormalize", k, rows, k * p)
        xi = unweave_incremental(self.cops[k], w, st.v[rows, : (k + 1) * p])
        self._count("unweave", k, rows, (k + 1) * p)
        val, fail = self.msm.invert(xi, hk, k)
        self._count("invert", k, rows)
        return np.asarray(val, dtype=float), np.asarray(fail, dtype=bool)

    def prepare(self, k, rows, hk: History):
        """q-recursion for the next interval; returns a mask of degenerate individuals."""
        st, p = self.state, self.p
        q0 = np.asarray(self.msm.threshold_quantile(hk, k), dtype=float) * np.ones(len(rows))
        st.q[rows, 0] = q0
        for m in range(1, (k + 1) * p):
            c = self.cops[k][m - 1]
            if c.is_independence:
                st.q[rows, m] = st.q[rows, m - 1]
            else:
                st.q[rows, m] = update_q(c, st.q[rows, m - 1], st.v[rows, m - 1])
        self._count("prepare_q", k, rows, (k + 1) * p)
        qs = st.q[rows, : (k + 1) * p]
        if self.below:
            return np.any(qs <= 1.0 - DEGENERATE, axis=1)
        return np.any(qs >= DEGENERATE, axis=1)


def simulate_survival(
    spec: ScenarioSpec, n: int, seed: int, rep: int = 0, ids=None, count: bool = False, trace: bool = False
) -> SurvivalData:
    """Simulate ``n`` individuals under a survival scenario (with competing events if configured)."""
    if spec.kind != "survival":
        raise ConfigurationError("simulate_survival needs a survival scenario")
    K = spec.K
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    n = ids.size
    layout = spec.layout
    block = uniform_block(seed, rep, ids, len(layout))
    stream = UniformStream(block, layout)
    hist = new_history(spec, n)
    counter = EvalCounter(n, K) if count else None

    outcome = _OutcomeProcess(spec, spec.msm, dict(spec.copulas), n, "@outcome", counter, True)
    comp = spec.competing
    comp_proc = None
    if comp is not None and comp.mode == "msm":
        comp_proc = _OutcomeProcess(spec, comp.msm, dict(comp.copulas), n, "@competing", counter, False)

    at_risk = np.zeros((n, K + 1), dtype=bool)
    ytilde = np.full((n, K + 1), np.nan)
    yfail = np.zeros((n, K + 1), dtype=bool)
    etype = np.zeros((n, K + 1), dtype=np.int8)
    dtilde = np.full((n, K + 1), np.nan) if comp is not None else None
    aborted = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    reasons = []

    pre = simulate_baseline(spec, stream, hist)
    p = len(spec.covariates)
    for k in range(K + 1):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        at_risk[rows, k] = True
        if k == 0:
            for name, w in pre.items():
                i = spec.covariate_names.index(name)
                outcome.state.v[rows, i] = w[rows]
                if comp_proc is not None:
                    comp_proc.state.v[rows, i] = w[rows]
        drawn = simulate_step(spec, k, hist, stream, rows)
        if counter is not None:
            # one evaluation per simulated block: the covariate vector, then the treatment vector
            counter.add("draw", k, rows, int(bool(spec.covariates)) + int(bool(spec.treatments)))
        for i, pr in enumerate(spec.covariates):
            if pr.name in drawn:
                outcome.state.v[rows, k * p + i] = drawn[pr.name]
                if comp_proc is not None:
                    comp_proc.state.v[rows, k * p + i] = drawn[pr.name]
        hk = hist.at(k, rows)
        try:
            val, fail = outcome.step(k, rows, hk, stream.take((k, "@outcome"), rows))
        except DegenerateSurvivalError as exc:
            raise DegenerateSurvivalError(f"step {k}: {exc}") from None
        ytilde[rows, k] = val
        yfail[rows, k] = fail
        etype[rows, k] = np.where(fail, EVENT_OUTCOME, EVENT_NONE)
        ended = fail.copy()

        if comp is not None:
            wd = stream.take((k, "@competing"), rows)
            if comp.mode == "conditional":
                d = np.asarray(quantile(comp.law, hk, wd, step=k), dtype=float) * np.ones(rows.size)
                if comp.law.family in ("Bernoulli", "Point"):
                    dfail = d >= 1.0
                    dtime = np.where(dfail, 1.0, np.inf)
                else:
                    dfail = d < 1.0
                    dtime = d
                dtilde[rows, k] = d
            else:
                dval, dfail = comp_proc.step(k, rows, hk, wd)
                dtilde[rows, k] = dval
                dtime = dval if not comp.msm.survivors_below else np.where(dfail, 1.0, np.inf)
            ytime = val if not spec.msm.survivors_below else np.where(fail, 1.0, np.inf)
            # the event occurring first ends the path; ties go to the outcome
            d_first = dfail & (~fail | (dtime < ytime))
            etype[rows, k] = np.where(d_first, EVENT_COMPETING, etype[rows, k])
            yfail[rows, k] = fail & ~d_first
            ended = fail | dfail

        alive[rows[ended]] = False
        if k < K:
            surv = rows[~ended]
            if surv.size:
                hs = hist.at(k, surv)
                bad = outcome.prepare(k, surv, hs)
                if comp_proc is not None:
                    bad |= comp_proc.prepare(k, surv, hs)
                if np.any(bad):
                    aborted[surv[bad]] = True
                    alive[surv[bad]] = False
                    reasons.append((k, int(bad.sum())))
    return SurvivalData(
        scenario=spec, ids=ids, rep=rep, history=hist, at_risk=at_risk, ytilde=ytilde, y=yfail, event_type=etype,
        aborted=aborted, dtilde=dtilde, state=outcome.state, counter=counter, draws=block if trace else None,
        abort_reasons=reasons,
    )


def simulate_survival_individual(spec: ScenarioSpec, seed: int, individual: int = 0, rep: int = 0) -> SurvivalTrajectory:
    data = simulate_survival(spec, 1, seed, rep, ids=[individual])
    return data.trajectory(0)


def simulate_competing(spec: ScenarioSpec, seed: int, individual: int = 0, rep: int = 0) -> SurvivalTrajectory:
    """One individual with both the outcome and the competing event; the path stops at the first event."""
    if spec.competing is None:
        raise ConfigurationError("scenario has no competing event configured")
    return simulate_survival_individual(spec, seed, individual, rep)
