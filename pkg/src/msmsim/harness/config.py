"""Scenario/study configuration files.

INI-style sections::

    [study]           kind, K, n, replications, seed, estimators, ...
    [params]          named constants usable in any expression
    [grid]            comma lists of parameter values; the study runs every combination
    [baseline]        NAME = Family(...)            (declaration order = draw order)
    [covariate.NAME]  step0 / step<k> / steps = Family(...); latent; precedes_baseline
    [treatment.NAME]  step0 / step<k> / steps = Family(...)
    [msm]             terminal: outcome = Family(...)
                      survival: form, lambda0, g | latent, threshold | hazard
    [copulas]         NAME.default = Family(...);  NAME[k,j] = Family(...)
    [competing]       mode = conditional (law = ...) | msm (form, lambda0, g, ...)
    [competing.copulas]
    [weights.NAME]    numerator = terms; denominator = terms
"""

from __future__ import annotations

import configparser
import hashlib
import itertools
import re
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from ..copulas import CopulaMatrix, parse_copula
from ..dists import ConfigurationError, parse_distribution
from ..expr import ExpressionError, LinearPredictor, canonical_text, parse_expression
from ..scenario import CompetingSpec, ProcessSpec, ScenarioSpec, SurvivalMsm, TerminalMsm

STUDY_KEYS = {
    "kind", "K", "n", "replications", "seed", "estimators", "ci", "bootstrap", "level", "alpha", "power",
    "targets", "weights", "oracle_n", "min_survivors", "description",
}
MSM_KEYS_TERMINAL = {"outcome"}
MSM_KEYS_SURVIVAL = {"form", "lambda0", "g", "latent", "threshold", "hazard"}
COMPETING_KEYS = {"mode", "law"} | MSM_KEYS_SURVIVAL
PROCESS_FLAG_KEYS = {"latent", "precedes_baseline"}
ESTIMATORS = ("iptw", "unweighted")
CI_KINDS = ("sandwich", "bootstrap")
POWER_KINDS = ("two-sided", "one-sided-lower", "one-sided-upper")

_STEP_KEY = re.compile(r"^step(\d+)$")
_COPULA_KEY = re.compile(r"^([A-Za-z_]\w*)(?:\.default|\[\s*(\d+)\s*,\s*(\d+)\s*\])$")
_IDENT = re.compile(r"^[A-Za-z_]\w*$")


class ConfigError(ConfigurationError):
    """Configuration problem with a file/line/field address."""


@dataclass(frozen=True)
class WeightModelSpec:
    """Propensity model terms for one binary treatment (intercepts implied)."""

    treatment: str
    numerator: tuple  # monomials
    denominator: tuple


@dataclass(frozen=True)
class StudyConfig:
    sections: tuple  # ((section, ((key, value), ...)), ...), canonical values
    kind: str
    K: int
    n: tuple
    replications: int
    seed: int
    estimators: tuple
    ci: tuple
    bootstrap: int
    level: float
    alpha: float
    power: str
    targets: tuple
    weights_mode: str
    oracle_n: int
    min_survivors: int
    params: tuple  # ((name, value), ...)
    grid: tuple  # ((name, (values...)), ...)
    weight_models: tuple
    scenario: ScenarioSpec
    source: str = field(default="<string>", compare=False)

    def section(self, name: str) -> dict:
        return dict(dict(self.sections).get(name, ()))

    def cells(self) -> list:
        """Every (parameter overrides, n) combination of the study grid."""
        names = [g for g, _ in self.grid]
        combos = list(itertools.product(*[vals for _, vals in self.grid])) if names else [()]
        return [(dict(zip(names, combo)), n) for combo in combos for n in self.n]

    def scenario_for(self, overrides: Mapping | None = None) -> ScenarioSpec:
        if not overrides:
            return self.scenario
        params = dict(self.params)
        params.update(overrides)
        return build_scenario(dict(self.sections), params, self.source, {})

    def weight_model(self, treatment: str) -> WeightModelSpec | None:
        for wm in self.weight_models:
            if wm.treatment == treatment:
                return wm
        return None

    def canonical_text(self) -> str:
        out = []
        for sec, items in self.sections:
            out.append(f"[{sec}]")
            out.extend(f"{k} = {v}" for k, v in items)
            out.append("")
        return "\n".join(out)

    def scenario_hash(self, overrides: Mapping | None = None) -> str:
        text = self.canonical_text()
        if overrides:
            text += "\n#overrides " + ",".join(f"{k}={overrides[k]!r}" for k in sorted(overrides))
        return hashlib.sha256(text.encode()).hexdigest()


# --- reading ---------------------------------------------------------------------

def _line_index(text: str) -> dict:
    """(section, key) -> line number, for error messages."""
    idx: dict = {}
    sec = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            sec = m.group(1).strip()
            idx[(sec, None)] = no
            continue
        m = re.match(r"^([^=:]+?)\s*[=:]", s)
        if m and sec is not None and not line[:1].isspace():
            idx[(sec, m.group(1).strip())] = no
    return idx


class _Ctx:
    def __init__(self, source: str, lines: dict):
        self.source, self.lines = source, lines

    def error(self, section: str, key: str | None, msg: str) -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, None))
        loc = f"{self.source}:{line}" if line else self.source
        field_ = f"[{section}]" + (f" {key}" if key else "")
        return ConfigError(f"{loc}: {field_}: {msg}")


def load_config(path) -> StudyConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_config_text(text, str(path))


def parse_config(path) -> StudyConfig:
    """Parse and fully validate a configuration file."""
    return load_config(path)


def parse_config_text(text: str, source: str = "<string>") -> StudyConfig:
    ctx = _Ctx(source, _line_index(text))
    cp = configparser.ConfigParser(
        interpolation=None, strict=True, inline_comment_prefixes=("#",), empty_lines_in_values=False,
        default_section="__none__",
    )
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}".replace("\n", " ")) from None
    raw = {sec: dict(cp.items(sec)) for sec in cp.sections()}
    sections = _canonical_sections(raw, ctx)
    study = dict(sections.get("study", {}))
    kind = study.get("kind")
    if kind not in ("terminal", "survival"):
        raise ctx.error("study", "kind", "must be 'terminal' or 'survival'")
    params = _parse_params(sections.get("params", {}), ctx)
    grid = _parse_grid(sections.get("grid", {}), params, ctx)
    scen = build_scenario(sections, params, source, ctx.lines)
    sd = _parse_study(study, ctx)
    wms = _parse_weights(sections, scen, ctx)
    canon = tuple((sec, tuple(items.items())) for sec, items in sections.items())
    return StudyConfig(
        sections=canon, kind=kind, K=scen.K, params=tuple(params.items()), grid=grid, weight_models=wms,
        scenario=scen, source=source, **sd,
    )


def _canonical_sections(raw: dict, ctx: _Ctx) -> dict:
    order = ["study", "params", "grid", "baseline"]
    covs = [s for s in raw if s.startswith("covariate.")]
    trts = [s for s in raw if s.startswith("treatment.")]
    tail = ["msm", "copulas", "competing", "competing.copulas"]
    wts = [s for s in raw if s.startswith("weights.")]
    known = set(order) | set(covs) | set(trts) | set(tail) | set(wts)
    for sec in raw:
        if sec not in known:
            raise ctx.error(sec, None, "unknown section")
    if "study" not in raw:
        raise ConfigError(f"{ctx.source}: missing [study] section")
    out = {}
    for sec in order + covs + trts + tail + wts:
        if sec not in raw:
            continue
        items = {}
        for key, val in raw[sec].items():
            val = " ".join(val.split())
            if not val:
                raise ctx.error(sec, key, "empty value")
            items[key] = _canonical_value(sec, key, val, ctx)
        out[sec] = items
    return out


def _is_expression_key(sec: str, key: str) -> bool:
    if sec in ("study", "grid"):
        return False
    if sec.startswith(("covariate.", "treatment.")) and key in PROCESS_FLAG_KEYS:
        return False
    if sec in ("msm", "competing") and key in ("form", "mode"):
        return False
    return True


def _canonical_value(sec, key, val, ctx):
    if _is_expression_key(sec, key):
        try:
            return canonical_text(val)
        except ExpressionError as exc:
            raise ctx.error(sec, key, str(exc)) from None
    if sec == "grid" or (sec == "study" and key in ("n", "estimators", "ci", "targets")):
        sep = ";" if key == "targets" else ","
        return f"{sep} ".join(p.strip() for p in val.split(sep) if p.strip())
    return val.strip()


def _num(val, sec, key, ctx, cast=float):
    try:
        return cast(val)
    except ValueError:
        raise ctx.error(sec, key, f"expected a number, got {val!r}") from None


def _parse_params(sec: dict, ctx) -> dict:
    out = {}
    for k, v in sec.items():
        if not _IDENT.match(k):
            raise ctx.error("params", k, "parameter names must be identifiers")
        try:
            lp = parse_expression(v, out)
        except ExpressionError as exc:
            raise ctx.error("params", k, str(exc)) from None
        if not lp.is_constant or lp.link != "identity":
            raise ctx.error("params", k, "parameters must be constant expressions")
        out[k] = lp.intercept
    return out


def _parse_grid(sec: dict, params: dict, ctx) -> tuple:
    out = []
    for k, v in sec.items():
        if k not in params:
            raise ctx.error("grid", k, "grid names must also be declared in [params]")
        vals = []
        for part in v.split(","):
            try:
                lp = parse_expression(part, {})
            except ExpressionError as exc:
                raise ctx.error("grid", k, str(exc)) from None
            if not lp.is_constant:
                raise ctx.error("grid", k, "grid values must be constants")
            vals.append(lp.intercept)
        out.append((k, tuple(vals)))
    return tuple(out)


def _parse_study(sec: dict, ctx) -> dict:
    unknown = set(sec) - STUDY_KEYS
    if unknown:
        raise ctx.error("study", sorted(unknown)[0], "unknown key")
    ns = tuple(_num(x, "study", "n", ctx, int) for x in sec.get("n", "1000").split(","))
    if any(x < 1 for x in ns):
        raise ctx.error("study", "n", "must be >= 1")
    reps = _num(sec.get("replications", "1"), "study", "replications", ctx, int)
    if reps < 1:
        raise ctx.error("study", "replications", "must be >= 1")
    ests = tuple(x.strip() for x in sec.get("estimators", "iptw, unweighted").split(","))
    for e in ests:
        if e not in ESTIMATORS:
            raise ctx.error("study", "estimators", f"unknown estimator {e!r} (choose from {ESTIMATORS})")
    ci = tuple(x.strip() for x in sec.get("ci", "sandwich").split(","))
    for c in ci:
        if c not in CI_KINDS:
            raise ctx.error("study", "ci", f"unknown interval kind {c!r}")
    boot = _num(sec.get("bootstrap", "200"), "study", "bootstrap", ctx, int)
    if "bootstrap" in ci and boot < 50:
        raise ctx.error("study", "bootstrap", "needs at least 50 resamples")
    level = _num(sec.get("level", "0.95"), "study", "level", ctx)
    alpha = _num(sec.get("alpha", "0.05"), "study", "alpha", ctx)
    if not (0 < level < 1 and 0 < alpha < 1):
        raise ctx.error("study", "level", "level and alpha must lie in (0, 1)")
    power = sec.get("power", "two-sided")
    if power not in POWER_KINDS:
        raise ctx.error("study", "power", f"choose from {POWER_KINDS}")
    wmode = sec.get("weights", "per-step")
    if wmode not in ("per-step", "pooled"):
        raise ctx.error("study", "weights", "must be 'per-step' or 'pooled'")
    targets = tuple(t.strip() for t in sec.get("targets", "").split(";") if t.strip())
    return dict(
        n=ns, replications=reps, seed=_num(sec.get("seed", "1"), "study", "seed", ctx, int), estimators=ests, ci=ci,
        bootstrap=boot, level=level, alpha=alpha, power=power, targets=targets, weights_mode=wmode,
        oracle_n=_num(sec.get("oracle_n", "100000"), "study", "oracle_n", ctx, int),
        min_survivors=_num(sec.get("min_survivors", "500"), "study", "min_survivors", ctx, int),
    )


def _bool(val, sec, key, ctx) -> bool:
    v = val.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ctx.error(sec, key, f"expected true/false, got {val!r}")


def _dist(text, params, name, sec, key, ctx):
    try:
        return parse_distribution(text, params, name)
    except ConfigurationError as exc:
        raise ctx.error(sec, key, str(exc)) from None


def _process(sec_name, items, K, kind, params, ctx) -> ProcessSpec:
    name = sec_name.split(".", 1)[1]
    if not _IDENT.match(name):
        raise ctx.error(sec_name, None, "variable names must be identifiers")
    allowed_flags = PROCESS_FLAG_KEYS if kind == "covariate" else set()
    laws = {}
    default = None
    for key, val in items.items():
        m = _STEP_KEY.match(key)
        if m:
            k = int(m.group(1))
            if k > K:
                raise ctx.error(sec_name, key, f"step {k} exceeds K={K}")
            laws[k] = _dist(val, params, name, sec_name, key, ctx)
        elif key == "steps":
            default = _dist(val, params, name, sec_name, key, ctx)
        elif key not in allowed_flags:
            raise ctx.error(sec_name, key, "unknown key")
    steps = []
    for k in range(K + 1):
        law = laws.get(k, default)
        if law is None:
            raise ctx.error(sec_name, None, f"no law for step {k} (add step{k} or steps)")
        steps.append(law)
    latent = _bool(items.get("latent", "false"), sec_name, "latent", ctx)
    pre = _bool(items.get("precedes_baseline", "false"), sec_name, "precedes_baseline", ctx)
    return ProcessSpec(name, kind, tuple(steps), latent, pre)


def _const(text, params, sec, key, ctx) -> float:
    try:
        lp = parse_expression(text, params)
    except ExpressionError as exc:
        raise ctx.error(sec, key, str(exc)) from None
    if not lp.is_constant:
        raise ctx.error(sec, key, "must be a constant expression")
    return lp.evaluate({}) if lp.link != "identity" else lp.intercept


def _survival_msm(items, params, sec, ctx) -> SurvivalMsm:
    form = items.get("form")
    if form is None:
        raise ctx.error(sec, "form", "missing (cox, additive or discrete)")
    try:
        g = parse_expression(items["g"], params) if "g" in items else LinearPredictor()
        lam = _const(items["lambda0"], params, sec, "lambda0", ctx) if "lambda0" in items else 1.0
        latent = _dist(items["latent"], params, "@outcome", sec, "latent", ctx) if "latent" in items else None
        thr = _const(items["threshold"], params, sec, "threshold", ctx) if "threshold" in items else 0.0
        hazard = parse_expression(items["hazard"], params) if "hazard" in items else None
        if form in ("cox", "additive") and ({"latent", "threshold", "hazard"} & set(items)):
            raise ctx.error(sec, "form", f"{form} form takes lambda0 and g only")
        if form == "discrete" and ({"lambda0", "g"} & set(items)):
            raise ctx.error(sec, "form", "discrete form takes latent/threshold or hazard")
        if form in ("cox", "additive") and lam <= 0:
            raise ctx.error(sec, "lambda0", "must be positive")
        return SurvivalMsm(form, float(lam), g, latent, float(thr), hazard)
    except ExpressionError as exc:
        raise ctx.error(sec, None, str(exc)) from None
    except ConfigError:
        raise
    except ConfigurationError as exc:
        raise ctx.error(sec, None, str(exc)) from None


def _copulas(items, K, params, sec, ctx) -> dict:
    entries: dict = {}
    defaults: dict = {}
    for key, val in items.items():
        m = _COPULA_KEY.match(key)
        if not m:
            raise ctx.error(sec, key, "keys look like NAME.default or NAME[k,j]")
        try:
            spec = parse_copula(val, params)
        except ConfigurationError as exc:
            raise ctx.error(sec, key, str(exc)) from None
        name = m.group(1)
        if m.group(2) is None:
            defaults[name] = spec
        else:
            k, j = int(m.group(2)), int(m.group(3))
            if not 0 <= j <= k <= K:
                raise ctx.error(sec, key, f"entry ({k}, {j}) outside 0 <= j <= k <= {K}")
            entries.setdefault(name, {})[(k, j)] = spec
    out = {}
    for name in set(entries) | set(defaults):
        out[name] = CopulaMatrix(K, tuple(entries.get(name, {}).items()), defaults.get(name))
    return out


def build_scenario(sections: dict, params: dict, source: str = "<string>", lines: dict | None = None) -> ScenarioSpec:
    ctx = _Ctx(source, lines or {})
    sections = {k: dict(v) for k, v in sections.items()}
    study = sections.get("study", {})
    kind = study.get("kind")
    if "K" not in study:
        raise ctx.error("study", "K", "missing follow-up count")
    K = _num(study["K"], "study", "K", ctx, int)
    if K < 0:
        raise ctx.error("study", "K", "must be nonnegative")
    baseline = []
    for name, val in sections.get("baseline", {}).items():
        if not _IDENT.match(name):
            raise ctx.error("baseline", name, "variable names must be identifiers")
        baseline.append((name, _dist(val, params, name, "baseline", name, ctx)))
    covs = [_process(s, v, K, "covariate", params, ctx) for s, v in sections.items() if s.startswith("covariate.")]
    trts = [_process(s, v, K, "treatment", params, ctx) for s, v in sections.items() if s.startswith("treatment.")]
    msm_items = sections.get("msm")
    if msm_items is None:
        raise ConfigError(f"{source}: missing [msm] section")
    if kind == "terminal":
        extra = set(msm_items) - MSM_KEYS_TERMINAL
        if extra:
            raise ctx.error("msm", sorted(extra)[0], "unknown key for a terminal outcome")
        if "outcome" not in msm_items:
            raise ctx.error("msm", "outcome", "missing")
        msm = TerminalMsm(_dist(msm_items["outcome"], params, "@outcome", "msm", "outcome", ctx))
    else:
        extra = set(msm_items) - MSM_KEYS_SURVIVAL
        if extra:
            raise ctx.error("msm", sorted(extra)[0], "unknown key for a survival MSM")
        msm = _survival_msm(msm_items, params, "msm", ctx)
    cops = _copulas(sections.get("copulas", {}), K, params, "copulas", ctx)
    competing = None
    if "competing" in sections:
        ci = sections["competing"]
        extra = set(ci) - COMPETING_KEYS
        if extra:
            raise ctx.error("competing", sorted(extra)[0], "unknown key")
        mode = ci.get("mode")
        has_law = "law" in ci
        has_msm = bool(set(ci) & MSM_KEYS_SURVIVAL)
        if has_law and has_msm:
            raise ctx.error("competing", "mode", "both competing-event modes configured")
        try:
            if mode == "conditional":
                if not has_law:
                    raise ctx.error("competing", "law", "conditional mode needs a law")
                competing = CompetingSpec("conditional", law=_dist(ci["law"], params, "@competing", "competing", "law", ctx))
            elif mode == "msm":
                if has_law:
                    raise ctx.error("competing", "law", "msm mode takes an MSM, not a law")
                cmsm = _survival_msm({k: v for k, v in ci.items() if k != "mode"}, params, "competing", ctx)
                ccops = _copulas(sections.get("competing.copulas", {}), K, params, "competing.copulas", ctx)
                competing = CompetingSpec("msm", msm=cmsm, copulas=tuple(ccops.items()))
            else:
                raise ctx.error("competing", "mode", "must be 'conditional' or 'msm'")
        except ConfigError:
            raise
        except ConfigurationError as exc:
            raise ctx.error("competing", None, str(exc)) from None
    elif "competing.copulas" in sections:
        raise ctx.error("competing.copulas", None, "no [competing] section")
    scen = ScenarioSpec(kind, K, tuple(baseline), tuple(covs), tuple(trts), msm, tuple(cops.items()), competing)
    try:
        scen.validate()
    except ConfigError:
        raise
    except ConfigurationError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return scen


def _parse_weights(sections: dict, scen: ScenarioSpec, ctx) -> tuple:
    out = []
    for sec, items in sections.items():
        if not sec.startswith("weights."):
            continue
        trt = sec.split(".", 1)[1]
        if trt not in scen.treatment_names:
            raise ctx.error(sec, None, f"{trt!r} is not a treatment")
        extra = set(items) - {"numerator", "denominator"}
        if extra:
            raise ctx.error(sec, sorted(extra)[0], "unknown key")
        terms = {}
        for key in ("numerator", "denominator"):
            text = items.get(key, "1")
            try:
                lp = parse_expression(text, {})
            except ExpressionError as exc:
                raise ctx.error(sec, key, str(exc)) from None
            if lp.link != "identity":
                raise ctx.error(sec, key, "list model terms only, e.g. 'L + A[-1]'")
            for f in lp.factors():
                known = scen.baseline_names + [p.name for p in scen.processes]
                if f.name not in known:
                    raise ctx.error(sec, key, f"unknown variable {f.name!r}")
                if f.name == trt and (getattr(f, "lag", 1) == 0 and not hasattr(f, "start")):
                    raise ctx.error(sec, key, f"future reference: {trt} cannot predict itself")
                if f.name in scen.treatment_names and f.name != trt and getattr(f, "lag", 1) == 0:
                    if scen.treatment_names.index(f.name) > scen.treatment_names.index(trt):
                        raise ctx.error(sec, key, f"future reference {f.label}")
            terms[key] = tuple(lp.monomials())
        if not set(terms["numerator"]) <= set(terms["denominator"]):
            raise ctx.error(sec, "denominator", "must include every numerator term")
        out.append(WeightModelSpec(trt, terms["numerator"], terms["denominator"]))
    return tuple(out)
