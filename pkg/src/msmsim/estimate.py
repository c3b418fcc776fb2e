"""Estimation used to validate simulated data: stabilized IPT weights, weighted
logistic and piecewise-exponential MSM fits, cluster-robust and bootstrap
uncertainty.

Designs are built from monomials of ``Ref``/``Cum`` factors evaluated on a
long person-period frame (one row per id and step, sorted by id then k).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import expit, log_expit

from .expr import Cum, Ref, monomial_label

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
INTERCEPT = "(Intercept)"


class EstimationError(RuntimeError):
    """A model could not be fitted (e.g. non-converged propensity model)."""


@dataclass
class FitResult:
    names: list
    coef: np.ndarray
    converged: bool
    iterations: int
    message: str = ""
    model_se: np.ndarray | None = None
    se: np.ndarray | None = None  # cluster-robust
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    weight_summary: dict | None = None
    loglik: float = np.nan
    max_score: float = np.nan
    information: np.ndarray | None = field(default=None, repr=False)
    score_rows: np.ndarray | None = field(default=None, repr=False)
    loglik_path: list = field(default_factory=list, repr=False)

    def as_series(self, what: str = "coef") -> pd.Series:
        return pd.Series(getattr(self, what), index=self.names)


# --- design construction -------------------------------------------------------------

def factor_column(frame: pd.DataFrame, f) -> np.ndarray:
    """Values of a Ref/Cum factor on a sorted person-period frame (NaN where the lag is unavailable)."""
    vals = frame[f.name].to_numpy(dtype=float)
    if isinstance(f, Ref) and f.lag == 0:
        return vals
    ids = frame["id"].to_numpy()
    ks = frame["k"].to_numpy() if "k" in frame else np.zeros(len(frame), dtype=int)
    if isinstance(f, Ref):
        out = np.full(vals.size, np.nan)
        if f.lag < vals.size:
            same = ids[f.lag :] == ids[: -f.lag or None] if f.lag else np.ones(vals.size, bool)
            gap = ks[f.lag :] - ks[: vals.size - f.lag] == f.lag
            ok = same & gap
            out[f.lag :][ok] = vals[: vals.size - f.lag][ok]
        return out
    assert isinstance(f, Cum)
    contrib = np.where(ks >= f.start, vals, 0.0)
    return pd.Series(contrib).groupby(ids, sort=False).cumsum().to_numpy()


def design_matrix(frame: pd.DataFrame, monomials: Sequence, intercept: bool = True):
    """(X, names) for the given monomials; NaN marks unavailable lagged terms."""
    cache: dict = {}
    cols, names = [], []
    if intercept:
        cols.append(np.ones(len(frame)))
        names.append(INTERCEPT)
    for mono in monomials:
        col = np.ones(len(frame))
        for f in mono:
            if f not in cache:
                cache[f] = factor_column(frame, f)
            col = col * cache[f]
        cols.append(col)
        names.append(monomial_label(mono))
    X = np.column_stack(cols) if cols else np.empty((len(frame), 0))
    return X, names


# --- numerical helpers -------------------------------------------------------------

def _rank_deficient_columns(X: np.ndarray, row_scale: np.ndarray | None = None) -> list:
    A = X if row_scale is None else X * row_scale[:, None]
    if A.shape[0] == 0:
        return list(range(A.shape[1]))
    _, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0) * 1e3
    rank = int(np.sum(d > tol))
    return sorted(int(c) for c in piv[rank:])


def _solve(info: np.ndarray, score: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(info)
        return scipy.linalg.cho_solve((c, low), score)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(info, score, rcond=None)[0]


def _newton(X, objective, start, names, max_iter, tol, kind):
    """Damped Newton ascent.  ``objective(beta)`` -> (loglik, score, information, score_rows)."""
    beta = np.asarray(start, dtype=float)
    ll, score, info, rows = objective(beta)
    path = [ll]
    msg = ""
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(score)):
            msg = "non-finite score"
            break
        if np.max(np.abs(score), initial=0.0) < tol:
            converged = True
            it -= 1
            break
        step = _solve(info, score)
        if not np.all(np.isfinite(step)):
            msg = "singular information during iterations"
            break
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_c, score_c, info_c, rows_c = objective(cand)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            msg = "step-halving failed to improve the likelihood"
            break
        change = np.max(np.abs(cand - beta), initial=0.0)
        beta, ll, score, info, rows = cand, ll_c, score_c, info_c, rows_c
        path.append(ll)
        if np.max(np.abs(score), initial=0.0) < tol or change < STEP_TOL:
            converged = True
            break
    else:
        msg = f"no convergence in {max_iter} iterations"
    if converged and np.max(np.abs(beta), initial=0.0) > 30:
        converged = False
        msg = f"{kind}: coefficients diverging (separation suspected)"
    model_se = None
    try:
        cov = np.linalg.inv(info)
        model_se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        pass
    return FitResult(
        names=list(names), coef=beta, converged=converged, iterations=it, message=msg, model_se=model_se,
        loglik=float(ll), max_score=float(np.max(np.abs(score), initial=0.0)), information=info, score_rows=rows,
        loglik_path=path,
    )


def _failed(names, p, msg) -> FitResult:
    return FitResult(names=list(names), coef=np.full(p, np.nan), converged=False, iterations=0, message=msg)


# --- weighted logistic regression --------------------------------------------------

def fit_logistic(
    X, y, weights=None, tol: float = SCORE_TOL, max_iter: int = 100, names: Sequence | None = None, offset=None
) -> FitResult:
    """Weighted Bernoulli maximum likelihood by Newton/IRLS with step-halving.

    Never raises on separation or rank deficiency; returns ``converged=False``
    with a message instead.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        return _failed(names, p, "weights must be finite and nonnegative")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        return _failed(names, p, "non-finite design or response")
    deficient = _rank_deficient_columns(X, np.sqrt(w))
    if deficient:
        return _failed(names, p, f"rank-deficient design; dependent columns {[names[j] for j in deficient]}")

    def objective(beta):
        eta = X @ beta + off
        ll = float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))
        mu = expit(eta)
        rows = X * (w * (y - mu))[:, None]
        info = (X * (w * mu * (1 - mu))[:, None]).T @ X
        return ll, rows.sum(axis=0), info, rows

    ybar = np.sum(w * y) / max(np.sum(w), np.finfo(float).tiny)
    start = np.zeros(p)
    if p and np.allclose(X[:, 0], 1.0) and 0 < ybar < 1:
        start[0] = np.log(ybar / (1 - ybar))
    return _newton(X, objective, start, names, max_iter, tol, "logistic")


# --- weighted piecewise-exponential regression ---------------------------------------

def fit_interval_exponential_msm(
    X, events, exposure, weights=None, tol: float = SCORE_TOL, max_iter: int = 100, names: Sequence | None = None
) -> FitResult:
    """Constant-hazard-per-interval MLE: rate = exp(X beta), first column the log baseline hazard.

    Each row contributes ``w * (d * eta - t * exp(eta))``.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(events, dtype=float)
    t = np.asarray(exposure, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(t < 0) or np.any(w < 0):
        return _failed(names, p, "exposure and weights must be nonnegative")
    deficient = _rank_deficient_columns(X, np.sqrt(w * np.maximum(t, 1e-300)))
    if deficient:
        return _failed(names, p, f"rank-deficient design; dependent columns {[names[j] for j in deficient]}")

    def objective(beta):
        eta = X @ beta
        with np.errstate(over="ignore"):
            mu = t * np.exp(eta)
        ll = float(np.sum(w * (d * eta - mu)))
        rows = X * (w * (d - mu))[:, None]
        info = (X * (w * mu)[:, None]).T @ X
        return ll, rows.sum(axis=0), info, rows

    start = np.zeros(p)
    tot_d, tot_t = np.sum(w * d), np.sum(w * t)
    if p and np.allclose(X[:, 0], 1.0) and tot_d > 0 and tot_t > 0:
        start[0] = np.log(tot_d / tot_t)
    return _newton(X, objective, start, names, max_iter, tol, "exponential")


# --- uncertainty ---------------------------------------------------------------------

def sandwich_se(fit: FitResult, clusters) -> np.ndarray:
    """Cluster-robust standard errors: bread = inverse observed information, meat = summed cluster scores."""
    if fit.information is None or fit.score_rows is None:
        raise EstimationError("fit carries no information matrix")
    try:
        bread = np.linalg.inv(fit.information)
    except np.linalg.LinAlgError:
        raise EstimationError("singular information matrix") from None
    if not np.all(np.isfinite(bread)) or np.linalg.cond(fit.information) > 1e14:
        raise EstimationError("singular information matrix")
    clusters = np.asarray(clusters)
    _, inv = np.unique(clusters, return_inverse=True)
    U = np.zeros((inv.max() + 1 if inv.size else 0, fit.score_rows.shape[1]))
    np.add.at(U, inv, fit.score_rows)
    cov = bread @ (U.T @ U) @ bread
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    fit.se = se
    return se


@dataclass
class BootstrapResult:
    ci_low: np.ndarray
    ci_high: np.ndarray
    estimates: np.ndarray  # (accepted resamples, p)
    dropped: int
    B: int

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.B


def bootstrap_indices(ids, B: int, seed: int) -> list:
    """Resampled id arrays (with replacement), deterministic given seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**63 - 1), 0xB007])))
    uniq = np.unique(np.asarray(ids))
    return [uniq[rng.integers(0, uniq.size, uniq.size)] for _ in range(B)]


def resample_frame(frame: pd.DataFrame, chosen_ids) -> pd.DataFrame:
    """Stack the trajectories of ``chosen_ids``; each copy gets a fresh id so it is its own cluster."""
    groups = frame.groupby("id", sort=True).indices
    pieces = [groups[i] for i in chosen_ids]
    rows = np.concatenate(pieces)
    out = frame.iloc[rows].reset_index(drop=True)
    out["id"] = np.repeat(np.arange(len(pieces)), [len(p) for p in pieces])
    return out


def bootstrap_ci(
    frame: pd.DataFrame, estimator: Callable, B: int = 200, seed: int = 0, level: float = 0.95
) -> BootstrapResult:
    """Percentile intervals from resampling whole individuals.

    ``estimator(frame)`` returns a coefficient vector, or raises / returns None
    when it fails; failed resamples are dropped and counted.
    """
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    ests, dropped = [], 0
    for chosen in bootstrap_indices(frame["id"].to_numpy(), B, seed):
        try:
            est = estimator(resample_frame(frame, chosen))
        except (EstimationError, np.linalg.LinAlgError):
            est = None
        if est is None or not np.all(np.isfinite(est)):
            dropped += 1
            continue
        ests.append(np.asarray(est, dtype=float))
    if not ests:
        nan = np.array([np.nan])
        return BootstrapResult(nan, nan, np.empty((0, 1)), dropped, B)
    arr = np.vstack(ests)
    a = (1 - level) / 2
    return BootstrapResult(np.quantile(arr, a, axis=0), np.quantile(arr, 1 - a, axis=0), arr, dropped, B)


# --- stabilized weights --------------------------------------------------------------

def _treatment_probability(fit: FitResult, X, a):
    mu = expit(X @ fit.coef)
    return np.where(a >= 0.5, mu, 1.0 - mu)


def stabilized_weights(frame: pd.DataFrame, wm, degenerate_steps: Sequence = (), pooled: bool = False) -> np.ndarray:
    """Per-row cumulative stabilized weight for treatment ``wm.treatment``.

    ``frame`` holds the rows at risk (sorted by id, k).  Steps listed in
    ``degenerate_steps`` (deterministic treatment) contribute ratio 1.  Terms
    whose lag reaches before follow-up are dropped at the steps where they are
    unavailable.  With ``pooled`` every step sharing the same available terms
    is fitted together.
    """
    frame = frame.reset_index(drop=True)
    a = frame[wm.treatment].to_numpy(dtype=float)
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise EstimationError(f"treatment {wm.treatment} must be binary for logistic propensity models")
    ks = frame["k"].to_numpy()
    Xn, _ = design_matrix(frame, wm.numerator)
    Xd, _ = design_matrix(frame, wm.denominator)
    ratio = np.ones(len(frame))
    groups: dict = {}
    for k in np.unique(ks):
        if int(k) in set(degenerate_steps):
            continue
        rows = np.flatnonzero(ks == k)
        avail_n = tuple(bool(np.all(np.isfinite(Xn[rows, j]))) for j in range(Xn.shape[1]))
        avail_d = tuple(bool(np.all(np.isfinite(Xd[rows, j]))) for j in range(Xd.shape[1]))
        key = (avail_n, avail_d) if pooled else (int(k),)
        groups.setdefault(key, []).append(rows)
        groups[key + ("cols",)] = (avail_n, avail_d)
    for key, parts in list(groups.items()):
        if key[-1] == "cols":
            continue
        avail_n, avail_d = groups[key + ("cols",)]
        rows = np.concatenate(parts)
        label = f"step {key[0]}" if not pooled else f"steps {sorted(set(ks[rows].tolist()))}"
        probs = []
        for X, avail in ((Xn, avail_n), (Xd, avail_d)):
            cols = [j for j, ok in enumerate(avail) if ok]
            Xs = X[np.ix_(rows, cols)]
            # drop constant non-intercept columns (e.g. a cumulative count still zero)
            keep = [0] + [c for c in range(1, Xs.shape[1]) if np.ptp(Xs[:, c]) > 0]
            Xs = Xs[:, keep]
            fit = fit_logistic(Xs, a[rows])
            if not fit.converged:
                raise EstimationError(f"propensity model for {wm.treatment} at {label} did not converge: {fit.message}")
            probs.append(_treatment_probability(fit, Xs, a[rows]))
        ratio[rows] = probs[0] / probs[1]
    ids = frame["id"].to_numpy()
    return pd.Series(ratio).groupby(ids, sort=False).cumprod().to_numpy()


def weight_summary(w) -> dict:
    w = np.asarray(w, dtype=float)
    return {"mean": float(np.mean(w)), "sd": float(np.std(w)), "min": float(np.min(w)), "max": float(np.max(w))}


# --- MSM fits on simulated data ------------------------------------------------------

@dataclass(frozen=True)
class MsmDesign:
    """What to regress: model kind, monomials (intercept implied) and the true coefficients."""

    kind: str  # "logistic" or "exponential"
    monomials: tuple
    names: tuple
    truth: tuple


def msm_design(scen, monomials: Sequence | None = None) -> MsmDesign:
    """Regression implied by a scenario's MSM, with its data-generating coefficients as truth.

    ``monomials`` fixes the regression terms; a term absent from this
    scenario's MSM (say, a coefficient set to zero) has true value 0.
    """
    from .scenario import SurvivalMsm, TerminalMsm

    msm = scen.msm
    if isinstance(msm, TerminalMsm):
        if msm.outcome.family != "Bernoulli":
            raise EstimationError("MSM estimation supports Bernoulli terminal outcomes only")
        lp = msm.predictor()
        if lp.link != "expit":
            raise EstimationError("terminal MSM must be written as Bernoulli(expit(...))")
        kind, intercept = "logistic", lp.intercept
    elif isinstance(msm, SurvivalMsm) and msm.form == "cox":
        lp = msm.g
        kind, intercept = "exponential", float(np.log(msm.lambda0)) + lp.intercept
    elif isinstance(msm, SurvivalMsm) and msm.form == "discrete" and msm.hazard is not None and msm.hazard.link == "expit":
        lp = msm.hazard
        kind, intercept = "logistic", lp.intercept
    else:
        raise EstimationError("MSM estimation supports Bernoulli terminal, cox and expit-hazard discrete forms")
    coefs = dict(lp.terms)
    monos = tuple(lp.monomials()) if monomials is None else tuple(monomials)
    return MsmDesign(
        kind=kind, monomials=monos, names=(INTERCEPT,) + tuple(monomial_label(m) for m in monos),
        truth=(intercept,) + tuple(coefs.get(m, 0.0) for m in monos),
    )


@dataclass
class MsmData:
    """Rows the MSM is fitted to: design, response, exposure, clusters, and the person-period frame for weights."""

    design: MsmDesign
    X: np.ndarray
    response: np.ndarray
    exposure: np.ndarray | None
    clusters: np.ndarray
    frame: pd.DataFrame  # person-period rows (at risk) used for weights
    fit_rows: np.ndarray  # positions in ``frame`` of the fitted rows


def prepare_msm_data(
    scen, person_period: pd.DataFrame, outcomes: pd.DataFrame | None = None, monomials: Sequence | None = None
) -> MsmData:
    """Assemble MSM regression inputs from the harness data schema."""
    design = msm_design(scen, monomials)
    frame = person_period.sort_values(["id", "k"], kind="stable").reset_index(drop=True)
    X_all, _ = design_matrix(frame, design.monomials)
    if scen.kind == "terminal":
        if outcomes is None:
            raise EstimationError("terminal estimation needs the outcome table")
        rows = np.flatnonzero(frame["k"].to_numpy() == scen.K)
        y_by_id = outcomes.set_index("id")["y"]
        ids = frame["id"].to_numpy()[rows]
        return MsmData(design, X_all[rows], y_by_id.loc[ids].to_numpy(dtype=float), None, ids, frame, rows)
    rows = np.arange(len(frame))
    y = frame["y"].to_numpy(dtype=float)
    exposure = None
    if design.kind == "exponential":
        exposure = np.minimum(frame["ytilde"].to_numpy(dtype=float), 1.0)
        if "event_type" in frame and "dtilde" in frame:
            comp = frame["event_type"].to_numpy() == 2
            d = frame["dtilde"].to_numpy(dtype=float)
            exposure = np.where(comp, np.minimum(np.where(d < 1.0, d, 1.0), exposure), exposure)
    return MsmData(design, X_all, y, exposure, frame["id"].to_numpy(), frame, rows)


def degenerate_treatment_steps(scen, treatment: str) -> list:
    p = scen.process(treatment)
    return [k for k in range(scen.K + 1) if p.at(k).is_point]


def fit_msm(
    scen, data: MsmData, weight_models: Sequence = (), weighted: bool = True, pooled: bool = False,
    compute_se: bool = True,
) -> FitResult:
    """IPTW (``weighted``) or unweighted MSM fit with cluster-robust SEs by id."""
    w_rows = np.ones(len(data.frame))
    if weighted:
        for wm in weight_models:
            w_rows = w_rows * stabilized_weights(data.frame, wm, degenerate_treatment_steps(scen, wm.treatment), pooled)
    w = w_rows[data.fit_rows]
    if data.design.kind == "logistic":
        fit = fit_logistic(data.X, data.response, w, names=data.design.names)
    else:
        fit = fit_interval_exponential_msm(data.X, data.response, data.exposure, w, names=data.design.names)
    fit.weight_summary = weight_summary(w)
    if fit.converged and compute_se:
        try:
            sandwich_se(fit, data.clusters)
        except EstimationError as exc:
            fit.message = str(exc)
    return fit


def msm_estimator(
    scen, weight_models: Sequence = (), weighted: bool = True, pooled: bool = False, monomials: Sequence | None = None
):
    """Closure mapping a (resampled) person-period frame to a coefficient vector, for bootstrap_ci.

    For terminal scenarios the outcome ``y`` must already be merged into the frame.
    """

    def run(frame: pd.DataFrame):
        outs = None
        if scen.kind == "terminal":
            outs = frame.loc[frame["k"] == scen.K, ["id", "y"]]
        data = prepare_msm_data(scen, frame, outs, monomials)
        fit = fit_msm(scen, data, weight_models, weighted, pooled, compute_se=False)
        return fit.coef if fit.converged else None

    return run
