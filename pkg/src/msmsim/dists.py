"""Univariate laws with history-dependent parameters: CDF, quantile, density.

All functions are vectorized: parameters evaluated on a history may be arrays
(one entry per individual) and ``x``/``u`` broadcast against them.
"""

from __future__ import annotations

import ast
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
from scipy import special

from .expr import ExpressionError, LinearPredictor, parse_node

FAMILIES: dict[str, tuple[str, ...]] = {
    "Normal": ("mean", "sd"),
    "Gamma": ("shape", "scale"),
    "Exponential": ("rate",),
    "Bernoulli": ("prob",),
    "Uniform": ("lo", "hi"),
    "Point": ("value",),
}
CONTINUOUS = ("Normal", "Gamma", "Exponential", "Uniform")

PROB_CLAMP = 1e-12
GAMMA_TOL = 1e-10
GAMMA_MAX_ITER = 200


class ConfigurationError(ValueError):
    """Scenario or parameter problem, reported with the variable and step involved."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


def _where(name: str, step) -> str:
    label = name or "<anonymous>"
    return f"{label} at step {step}" if step is not None else label


@dataclass(frozen=True)
class DistributionSpec:
    family: str
    params: tuple  # ((parameter name, LinearPredictor), ...) in FAMILIES order
    name: str = ""

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"{self.name or 'distribution'}: unknown family {self.family!r}")
        names = tuple(p for p, _ in self.params)
        if names != FAMILIES[self.family]:
            raise ConfigurationError(
                f"{self.name or self.family}: parameters {names} do not match {FAMILIES[self.family]}"
            )

    @classmethod
    def of(cls, family: str, *values, name: str = "") -> "DistributionSpec":
        """Build from constants or LinearPredictors in positional order."""
        preds = tuple(
            (p, v if isinstance(v, LinearPredictor) else LinearPredictor.constant(v))
            for p, v in zip(FAMILIES.get(family, ()), values)
        )
        return cls(family, preds, name)

    def with_name(self, name: str) -> "DistributionSpec":
        return DistributionSpec(self.family, self.params, name)

    @property
    def is_point(self) -> bool:
        return self.family == "Point"

    @property
    def is_continuous(self) -> bool:
        return self.family in CONTINUOUS

    def factors(self) -> set:
        out = set()
        for _, lp in self.params:
            out |= lp.factors()
        return out

    def predictor(self, param: str) -> LinearPredictor:
        return dict(self.params)[param]

    def __str__(self) -> str:
        return f"{self.family}({', '.join(str(lp) for _, lp in self.params)})"

    def eval_params(self, history, step=None) -> dict:
        return eval_params(self, history, step)

    def cdf(self, history, x, step=None):
        return cdf(self, history, x, step)

    def quantile(self, history, u, step=None):
        return quantile(self, history, u, step)

    def pdf(self, history, x, step=None):
        return pdf(self, history, x, step)


def parse_distribution(text: str, params: Mapping | None = None, name: str = "") -> DistributionSpec:
    """Parse ``Family(arg, ...)`` with positional or keyword arguments."""
    try:
        node = ast.parse(text.strip(), mode="eval").body
    except SyntaxError as exc:
        raise ConfigurationError(f"{name}: cannot parse {text!r}: {exc.msg}") from None
    if not (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)):
        raise ConfigurationError(f"{name}: expected Family(...), got {text!r}")
    family = node.func.id
    if family not in FAMILIES:
        raise ConfigurationError(f"{name}: unknown family {family!r}")
    pnames = FAMILIES[family]
    given: dict[str, ast.AST] = {}
    if len(node.args) > len(pnames):
        raise ConfigurationError(f"{name}: {family} takes {len(pnames)} parameters")
    for p, arg in zip(pnames, node.args):
        given[p] = arg
    for kw in node.keywords:
        if kw.arg not in pnames or kw.arg in given:
            raise ConfigurationError(f"{name}: bad or repeated parameter {kw.arg!r} for {family}")
        given[kw.arg] = kw.value
    missing = [p for p in pnames if p not in given]
    if missing:
        raise ConfigurationError(f"{name}: {family} missing parameters {missing}")
    try:
        preds = tuple((p, parse_node(given[p], params)) for p in pnames)
    except ExpressionError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    return DistributionSpec(family, preds, name)


def eval_params(spec: DistributionSpec, history, step=None) -> dict:
    """Evaluate every parameter on ``history`` and check admissibility."""
    out = {}
    for pname, lp in spec.params:
        try:
            val = np.asarray(lp.evaluate(history), dtype=float)
        except ExpressionError as exc:
            raise ConfigurationError(f"{_where(spec.name, step)}: {exc}") from None
        if pname == "prob" and lp.link == "expit":
            val = np.clip(val, PROB_CLAMP, 1.0 - PROB_CLAMP)
        out[pname] = val if val.ndim else float(val)
    _check_admissible(spec, out, step)
    return out


def _check_admissible(spec, p, step):
    def bad(cond, what):
        if np.any(cond):
            raise ConfigurationError(f"{_where(spec.name, step)}: inadmissible {spec.family} parameter ({what})")

    fam = spec.family
    for k, v in p.items():
        bad(~np.isfinite(v), f"{k} not finite")
    if fam == "Normal":
        bad(np.asarray(p["sd"]) <= 0, "sd <= 0")
    elif fam == "Gamma":
        bad(np.asarray(p["shape"]) <= 0, "shape <= 0")
        bad(np.asarray(p["scale"]) <= 0, "scale <= 0")
    elif fam == "Exponential":
        bad(np.asarray(p["rate"]) <= 0, "rate <= 0")
    elif fam == "Bernoulli":
        pr = np.asarray(p["prob"])
        bad((pr < 0) | (pr > 1), "prob outside [0, 1]")
    elif fam == "Uniform":
        bad(np.asarray(p["lo"]) >= np.asarray(p["hi"]), "lo >= hi")


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def cdf(spec: DistributionSpec, history, x, step=None):
    p = eval_params(spec, history, step)
    x = np.asarray(x, dtype=float)
    fam = spec.family
    if fam == "Normal":
        r = special.ndtr((x - p["mean"]) / p["sd"])
    elif fam == "Gamma":
        r = gamma_cdf(x, p["shape"], p["scale"])
    elif fam == "Exponential":
        r = -np.expm1(-p["rate"] * np.maximum(x, 0.0))
    elif fam == "Uniform":
        r = np.clip((x - p["lo"]) / (np.asarray(p["hi"]) - p["lo"]), 0.0, 1.0)
    elif fam == "Bernoulli":
        r = np.where(x < 0, 0.0, np.where(x < 1, 1.0 - np.asarray(p["prob"]), 1.0))
    else:  # Point
        r = np.where(x < p["value"], 0.0, 1.0)
    return _out(r)


def quantile(spec: DistributionSpec, history, u, step=None):
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise DomainError(f"{_where(spec.name, step)}: quantile argument must lie in (0, 1)")
    p = eval_params(spec, history, step)
    fam = spec.family
    if fam == "Normal":
        r = p["mean"] + p["sd"] * special.ndtri(u)
    elif fam == "Gamma":
        r = gamma_quantile(u, p["shape"], p["scale"])
    elif fam == "Exponential":
        r = -np.log1p(-u) / p["rate"]
    elif fam == "Uniform":
        r = p["lo"] + u * (np.asarray(p["hi"]) - p["lo"])
    elif fam == "Bernoulli":
        r = (u > 1.0 - np.asarray(p["prob"])).astype(float)
    else:
        r = np.broadcast_to(np.asarray(p["value"], dtype=float), np.broadcast(u, p["value"]).shape).copy()
    return _out(r)


def pdf(spec: DistributionSpec, history, x, step=None):
    """Density for continuous families, probability mass for Bernoulli/Point."""
    p = eval_params(spec, history, step)
    x = np.asarray(x, dtype=float)
    fam = spec.family
    if fam == "Normal":
        z = (x - p["mean"]) / p["sd"]
        r = np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * p["sd"])
    elif fam == "Gamma":
        k, s = p["shape"], p["scale"]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(x > 0, np.exp((k - 1) * np.log(x / s) - x / s - special.gammaln(k)) / s, 0.0)
    elif fam == "Exponential":
        r = np.where(x >= 0, p["rate"] * np.exp(-p["rate"] * np.maximum(x, 0.0)), 0.0)
    elif fam == "Uniform":
        w = np.asarray(p["hi"]) - p["lo"]
        r = np.where((x >= p["lo"]) & (x <= p["hi"]), 1.0 / w, 0.0)
    elif fam == "Bernoulli":
        pr = np.asarray(p["prob"])
        r = np.where(x == 1, pr, np.where(x == 0, 1.0 - pr, 0.0))
    else:
        r = np.where(x == p["value"], 1.0, 0.0)
    return _out(r)


# --- special functions ---------------------------------------------------------

def gamma_cdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    return special.gammainc(shape, np.maximum(x, 0.0) / scale)


def gamma_quantile(u, shape, scale, tol: float = GAMMA_TOL, max_iter: int = GAMMA_MAX_ITER):
    """Bisection on the regularized incomplete gamma CDF.

    Stops when the bracket is narrower than ``tol`` in absolute terms or, for
    quantiles close to zero, relative to the bracket's upper end.
    """
    u, shape, scale = np.broadcast_arrays(
        np.asarray(u, dtype=float), np.asarray(shape, dtype=float), np.asarray(scale, dtype=float)
    )
    lo = np.zeros(u.shape)
    hi = shape * scale + 40.0 * np.sqrt(shape) * scale
    # extremely small shapes can put mass beyond the nominal bracket
    while True:
        short = gamma_cdf(hi, shape, scale) < u
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = gamma_cdf(mid, shape, scale) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        width = hi - lo
        if np.all((width < tol) | (width < tol * hi)):
            break
    return 0.5 * (lo + hi)


def student_t_cdf(x, df):
    return special.stdtr(df, x)


def student_t_quantile(u, df):
    """Student-t quantile with one Newton step on the incomplete-beta CDF."""
    u = np.asarray(u, dtype=float)
    df = np.asarray(df, dtype=float)
    x = special.stdtrit(df, u)
    dens = np.exp(
        special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * np.log(df * np.pi)
        - (df + 1) / 2 * np.log1p(x * x / df)
    )
    resid = special.stdtr(df, x) - u
    ok = np.isfinite(x) & (dens > 0)
    step = np.where(ok, resid / np.where(ok, dens, 1.0), 0.0)
    # only accept the polish where it is a small correction
    small = np.abs(step) < 1e-6 * (1.0 + np.abs(x))
    return np.where(small, x - step, x)
