"""Scenario description shared by the terminal and survival simulators.

A scenario lists baseline variables, covariate processes (each linked to the
outcome through its own copula matrix), treatment processes, the marginal
structural model, and optionally a competing event.  Variables are generated
in this order: covariates flagged ``precedes_baseline`` at step 0, the
baseline block, then per step k covariates, treatments, outcome draw(s).
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .copulas import CopulaMatrix
from .dists import ConfigurationError, DistributionSpec
from .expr import Cum, ExpressionError, LinearPredictor, Ref


@dataclass(frozen=True)
class ProcessSpec:
    """A time-varying variable with one DistributionSpec per step 0..K."""

    name: str
    kind: str  # "covariate" or "treatment"
    steps: tuple
    latent: bool = False
    precedes_baseline: bool = False

    def at(self, k: int) -> DistributionSpec:
        return self.steps[k]


@dataclass(frozen=True)
class TerminalMsm:
    """Law of the end-of-follow-up outcome under intervention, given baseline variables."""

    outcome: DistributionSpec

    def predictor(self) -> LinearPredictor:
        fam = self.outcome.family
        key = {"Bernoulli": "prob", "Normal": "mean", "Exponential": "rate"}[fam]
        return self.outcome.predictor(key)


@dataclass(frozen=True)
class SurvivalMsm:
    """Per-interval causal law of the incremental failure time (interval length 1).

    ``cox``: rate lambda0*exp(g).  ``additive``: rate lambda0 + g.
    ``discrete``: failure iff a latent draw from ``latent`` exceeds ``threshold``;
    with ``hazard`` given instead, the failure probability is that predictor and
    the latent variable is Uniform(0, 1) with threshold 1 - hazard.
    """

    form: str
    lambda0: float = 1.0
    g: LinearPredictor = field(default_factory=LinearPredictor)
    latent: DistributionSpec | None = None
    threshold: float = 0.0
    hazard: LinearPredictor | None = None

    def __post_init__(self):
        if self.form not in ("cox", "additive", "discrete"):
            raise ConfigurationError(f"msm: unknown survival form {self.form!r}")
        if self.form == "discrete" and (self.latent is None) == (self.hazard is None):
            raise ConfigurationError("msm: discrete form needs exactly one of latent law or hazard")
        if self.form in ("cox", "additive") and self.g.link != "identity":
            raise ConfigurationError("msm: g must be a plain linear predictor")

    @property
    def survivors_below(self) -> bool:
        """True when survival corresponds to the lower part of the outcome quantile scale."""
        return self.form == "discrete"

    def factors(self) -> set:
        out = set(self.g.factors())
        if self.latent is not None:
            out |= self.latent.factors()
        if self.hazard is not None:
            out |= self.hazard.factors()
        return out

    def rate(self, history, step=None):
        if self.form == "cox":
            return self.lambda0 * np.exp(self.g.evaluate(history))
        rate = self.lambda0 + np.asarray(self.g.evaluate(history), dtype=float)
        if np.any(rate <= 0):
            raise ConfigurationError(f"msm: nonpositive additive hazard at step {step}")
        return rate

    def _hazard_prob(self, history):
        p = np.asarray(self.hazard.evaluate(history), dtype=float)
        if self.hazard.link == "expit":
            p = np.clip(p, 1e-12, 1 - 1e-12)
        if np.any((p <= 0) | (p >= 1)):
            raise ConfigurationError("msm: discrete hazard must lie in (0, 1)")
        return p

    def threshold_quantile(self, history, step=None):
        """Quantile level separating failure from survival in the current interval.

        Continuous forms: P(incremental time < 1), failures lie below it.
        Discrete form: P(latent <= threshold), survivors lie at or below it.
        """
        if self.form == "discrete":
            if self.hazard is not None:
                return 1.0 - self._hazard_prob(history)
            return np.asarray(self.latent.cdf(history, self.threshold, step), dtype=float)
        return -np.expm1(-self.rate(history, step))

    def invert(self, u, history, step=None):
        """Marginal quantile -> (incremental time or latent value, failure indicator)."""
        u = np.asarray(u, dtype=float)
        if self.form == "discrete":
            if self.hazard is not None:
                s = u
                fail = u > 1.0 - self._hazard_prob(history)
            else:
                s = np.asarray(self.latent.quantile(history, u, step), dtype=float)
                fail = s > self.threshold
            return s, fail
        ytilde = -np.log1p(-u) / self.rate(history, step)
        return ytilde, ytilde < 1.0

    def cdf(self, history, y, step=None):
        """CDF of the incremental failure time (continuous forms) or latent value."""
        if self.form == "discrete":
            if self.hazard is not None:
                return np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
            return self.latent.cdf(history, y, step)
        return -np.expm1(-self.rate(history, step) * np.maximum(np.asarray(y, dtype=float), 0.0))


@dataclass(frozen=True)
class CompetingSpec:
    """Competing event: ``conditional`` draws from ``law`` given the path; ``msm`` uses its own MSM and copulas."""

    mode: str
    law: DistributionSpec | None = None
    msm: SurvivalMsm | None = None
    copulas: tuple = ()  # ((covariate name, CopulaMatrix), ...)

    def __post_init__(self):
        if self.mode not in ("conditional", "msm"):
            raise ConfigurationError(f"competing: unknown mode {self.mode!r}")
        if self.mode == "conditional" and (self.law is None or self.msm is not None):
            raise ConfigurationError("competing: both modes configured, or conditional mode without a law")
        if self.mode == "msm" and (self.msm is None or self.law is not None):
            raise ConfigurationError("competing: both modes configured, or msm mode without an MSM")

    def copula(self, name: str) -> CopulaMatrix:
        return dict(self.copulas)[name]


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str  # "terminal" or "survival"
    K: int
    baseline: tuple = ()  # ((name, DistributionSpec), ...)
    covariates: tuple = ()  # ProcessSpec, outcome-linked, generation order
    treatments: tuple = ()
    msm: TerminalMsm | SurvivalMsm | None = None
    copulas: tuple = ()  # ((covariate name, CopulaMatrix), ...)
    competing: CompetingSpec | None = None

    # -- lookups ---------------------------------------------------------------
    @property
    def baseline_names(self) -> list:
        return [n for n, _ in self.baseline]

    @property
    def covariate_names(self) -> list:
        return [p.name for p in self.covariates]

    @property
    def treatment_names(self) -> list:
        return [p.name for p in self.treatments]

    @property
    def processes(self) -> tuple:
        return tuple(self.covariates) + tuple(self.treatments)

    def process(self, name: str) -> ProcessSpec:
        for p in self.processes:
            if p.name == name:
                return p
        raise KeyError(name)

    def copula_matrix(self, name: str) -> CopulaMatrix:
        return dict(self.copulas)[name]

    # -- draw layout -------------------------------------------------------------
    @property
    def layout(self) -> dict:
        """Column of the per-individual uniform block used by each draw."""
        cols: dict = {}
        for p in self.covariates:
            if p.precedes_baseline:
                cols[(0, p.name)] = len(cols)
        for name, _ in self.baseline:
            cols[("base", name)] = len(cols)
        for k in range(self.K + 1):
            for p in self.covariates:
                if not (k == 0 and p.precedes_baseline):
                    cols[(k, p.name)] = len(cols)
            for p in self.treatments:
                cols[(k, p.name)] = len(cols)
            if self.kind == "survival":
                cols[(k, "@outcome")] = len(cols)
        if self.kind == "terminal":
            cols[("final", "@outcome")] = len(cols)
        # appended last so that adding a competing event leaves every other draw in place
        if self.competing is not None:
            for k in range(self.K + 1):
                cols[(k, "@competing")] = len(cols)
        return cols

    @property
    def width(self) -> int:
        return len(self.layout)

    # -- regimes -----------------------------------------------------------------
    def with_regime(self, regime: Mapping) -> "ScenarioSpec":
        """Copy with the named treatments forced to fixed values (point masses)."""
        new = []
        for p in self.treatments:
            if p.name not in regime:
                new.append(p)
                continue
            vals = regime[p.name]
            vals = [vals] * (self.K + 1) if np.isscalar(vals) else list(vals)
            if len(vals) != self.K + 1:
                raise ConfigurationError(f"regime for {p.name} needs {self.K + 1} values, got {len(vals)}")
            steps = tuple(DistributionSpec.of("Point", float(v), name=p.name) for v in vals)
            new.append(replace(p, steps=steps))
        unknown = set(regime) - set(self.treatment_names)
        if unknown:
            raise ConfigurationError(f"regime names unknown treatments {sorted(unknown)}")
        return replace(self, treatments=tuple(new))

    # -- validation --------------------------------------------------------------
    def validate(self) -> "ScenarioSpec":
        if self.kind not in ("terminal", "survival"):
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.K < 0:
            raise ConfigurationError("K must be nonnegative")
        names = self.baseline_names + [p.name for p in self.processes]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ConfigurationError(f"duplicate variable names {sorted(dup)}")
        for p in self.processes:
            if len(p.steps) != self.K + 1:
                raise ConfigurationError(f"{p.name}: needs a law for each of {self.K + 1} steps")
        for p in self.treatments:
            if p.latent or p.precedes_baseline:
                raise ConfigurationError(f"{p.name}: treatments cannot be latent or precede the baseline block")
        if self.msm is None:
            raise ConfigurationError("scenario needs an outcome model")
        if self.kind == "terminal" and not isinstance(self.msm, TerminalMsm):
            raise ConfigurationError("terminal scenarios need a terminal outcome law")
        if self.kind == "survival" and not isinstance(self.msm, SurvivalMsm):
            raise ConfigurationError("survival scenarios need a survival MSM")
        if isinstance(self.msm, TerminalMsm) and self.msm.outcome.family not in ("Bernoulli", "Normal", "Exponential"):
            raise ConfigurationError("terminal outcome must be Bernoulli, Normal or Exponential")
        if self.competing is not None and self.kind != "survival":
            raise ConfigurationError("competing events need a survival scenario")

        order = _Order(self)
        for name, spec in self.baseline:
            order.check(spec.factors(), name, "base", spec_label=name)
        for p in self.processes:
            for k in range(self.K + 1):
                order.check(p.at(k).factors(), p.name, k)
        self._check_msm_factors(self.msm, order)
        if self.competing is not None:
            if self.competing.mode == "conditional":
                for k in range(self.K + 1):
                    order.check(self.competing.law.factors(), "@competing", k)
            else:
                self._check_msm_factors(self.competing.msm, order)
        self._check_copulas(self.copulas, "copulas")
        if self.competing is not None and self.competing.mode == "msm":
            self._check_copulas(self.competing.copulas, "competing copulas")
        return self

    def _check_msm_factors(self, msm, order: "_Order"):
        facs = msm.outcome.factors() if isinstance(msm, TerminalMsm) else msm.factors()
        bad = [f.label for f in facs if f.name in self.covariate_names]
        if bad:
            raise ConfigurationError(f"msm: references covariates {bad}; the causal margin may use only baseline and treatment terms")
        steps = [self.K] if isinstance(msm, TerminalMsm) else range(self.K + 1)
        for k in steps:
            order.check(facs, "@outcome", k)

    def _check_copulas(self, copulas, label):
        mats = dict(copulas)
        extra = set(mats) - set(self.covariate_names)
        if extra:
            raise ConfigurationError(f"{label}: entries for unknown covariates {sorted(extra)}")
        rows = [self.K] if self.kind == "terminal" else None
        for p in self.covariates:
            if p.name not in mats:
                raise ConfigurationError(f"{label}: no copula matrix for covariate {p.name}")
            m = mats[p.name]
            if m.K != self.K:
                raise ConfigurationError(f"{label}: matrix for {p.name} has K={m.K}, scenario K={self.K}")
            miss = m.missing(rows)
            if miss:
                raise ConfigurationError(f"{label}: {p.name} missing copula entries {miss[:5]} and no default")


class _Order:
    """Generation-order bookkeeping used to reject future and dangling references."""

    def __init__(self, scen: ScenarioSpec):
        self.scen = scen
        self.base = scen.baseline_names
        self.procs = {p.name: p for p in scen.processes}
        seq = []
        for p in scen.covariates:
            if p.precedes_baseline:
                seq.append((0, p.name))
        for n in self.base:
            seq.append(("base", n))
        for k in range(scen.K + 1):
            for p in scen.covariates:
                if not (k == 0 and p.precedes_baseline):
                    seq.append((k, p.name))
            for p in scen.treatments:
                seq.append((k, p.name))
            seq.append((k, "@outcome"))
            seq.append((k, "@competing"))
        self.pos = {key: i for i, key in enumerate(seq)}

    def check(self, factors, owner: str, step, spec_label=None):
        where = f"{owner} at step {step}" if step != "base" else f"baseline {owner}"
        here = self.pos[(step, owner)] if (step, owner) in self.pos else None
        k = 0 if step == "base" else step
        for f in factors:
            name = f.name
            if name in self.base:
                if isinstance(f, Cum) or f.lag:
                    raise ConfigurationError(f"{where}: baseline variable {name} has no time index ({f.label})")
                if self.pos[("base", name)] >= here:
                    raise ConfigurationError(f"{where}: future reference {f.label} (declared later)")
                continue
            if name not in self.procs:
                raise ConfigurationError(f"{where}: unknown variable {name!r} in {f.label}")
            if isinstance(f, Ref):
                t = k - f.lag
                if t < 0:
                    raise ConfigurationError(f"{where}: {f.label} addresses time {t} before follow-up starts")
                last = t
            else:
                last = k
            if self.pos[(last, name)] >= here:
                raise ConfigurationError(f"{where}: future reference {f.label} (not yet generated)")


class History:
    """Vectorized read access to simulated values for individuals ``rows`` at step ``k``."""

    def __init__(self, base: dict, proc: dict, k: int, rows=None):
        self.base = base
        self.proc = proc
        self.k = k
        self.rows = rows

    def at(self, k: int, rows=None) -> "History":
        return History(self.base, self.proc, k, self.rows if rows is None else rows)

    def _sel(self, arr):
        return arr if self.rows is None else arr[self.rows]

    def lookup(self, f):
        if f.name in self.base:
            return self._sel(self.base[f.name])
        if f.name not in self.proc:
            raise ExpressionError(f"unresolved reference {f.label!r}")
        arr = self.proc[f.name]
        if isinstance(f, Ref):
            t = self.k - f.lag
            if t < 0:
                raise ExpressionError(f"{f.label} addresses time {t}")
            return self._sel(arr[:, t])
        if f.start > self.k:
            return self._sel(np.zeros(arr.shape[0]))
        return self._sel(arr[:, f.start : self.k + 1].sum(axis=1))


def new_history(scen: ScenarioSpec, n: int) -> History:
    proc = {p.name: np.full((n, scen.K + 1), np.nan) for p in scen.processes}
    return History({}, proc, 0)


def regime_from_text(text: str) -> dict:
    """Parse ``A=1;S=0`` or ``A=1,1,0,0,0`` into a regime mapping."""
    out: dict = {}
    for part in filter(None, (s.strip() for s in text.split(";"))):
        if "=" not in part:
            raise ConfigurationError(f"regime entry {part!r} must look like NAME=value[,value...]")
        name, vals = (s.strip() for s in part.split("=", 1))
        try:
            nums = [float(v) for v in vals.split(",")]
        except ValueError:
            raise ConfigurationError(f"regime values for {name} must be numbers") from None
        out[name] = nums[0] if len(nums) == 1 else nums
    return out


def sequence_label(values: Sequence) -> str:
    return ",".join(f"{v:g}" for v in values)
