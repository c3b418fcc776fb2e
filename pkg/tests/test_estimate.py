import numpy as np
import pandas as pd
import pytest
from scipy.special import expit, logit

from msmsim.estimate import (
    bootstrap_ci, bootstrap_indices, design_matrix, fit_interval_exponential_msm, fit_logistic, fit_msm,
    prepare_msm_data, sandwich_se, stabilized_weights,
)
from msmsim.expr import Cum, Ref
from msmsim.harness.config import WeightModelSpec
from msmsim.survival import simulate_survival

from .conftest import scenario_from


def logistic_data(n, beta, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.integers(0, 2, n)])
    y = (rng.random(n) < expit(X @ beta)).astype(float)
    return X, y


def test_intercept_only_is_logit_of_mean():
    y = np.array([1, 0, 0, 1, 1, 0, 0, 0, 1, 0], dtype=float)
    fit = fit_logistic(np.ones((10, 1)), y)
    assert fit.converged and fit.coef[0] == pytest.approx(logit(0.4), abs=1e-10)


def test_recovers_known_coefficients():
    beta = np.array([-0.5, 0.8, -1.2])
    X, y = logistic_data(100_000, beta, 1)
    fit = fit_logistic(X, y)
    assert np.all(np.abs(fit.coef - beta) < 3 * fit.model_se)


def test_solver_optimality_and_monotone_objective():
    X, y = logistic_data(5000, np.array([0.3, -0.7, 0.4]), 2)
    fit = fit_logistic(X, y, weights=np.random.default_rng(0).uniform(0.2, 3, 5000))
    assert fit.max_score < 1e-8
    assert np.all(np.diff(fit.loglik_path) >= -1e-9)
    rng = np.random.default_rng(3)
    Xe = np.column_stack([np.ones(4000), rng.integers(0, 2, 4000)])
    t = rng.uniform(0.1, 1, 4000)
    d = (rng.random(4000) < 0.3).astype(float)
    efit = fit_interval_exponential_msm(Xe, d, t)
    assert efit.max_score < 1e-8 and np.all(np.diff(efit.loglik_path) >= -1e-9)


def test_constant_weights_do_not_move_estimates():
    X, y = logistic_data(3000, np.array([0.1, 0.5, -0.5]), 4)
    a, b = fit_logistic(X, y), fit_logistic(X, y, weights=np.full(3000, 3.7))
    assert np.allclose(a.coef, b.coef, atol=1e-9)


def test_separation_is_reported_not_raised():
    X = np.column_stack([np.ones(20), np.r_[np.zeros(10), np.ones(10)]])
    fit = fit_logistic(X, X[:, 1])
    assert not fit.converged and fit.message


def test_exponential_rate_is_events_over_exposure():
    d = np.array([1, 0, 1, 1, 0, 0], dtype=float)
    t = np.array([0.2, 1.0, 0.7, 0.1, 1.0, 1.0])
    fit = fit_interval_exponential_msm(np.ones((6, 1)), d, t)
    assert np.exp(fit.coef[0]) == pytest.approx(3 / t.sum(), rel=1e-10)
    fit2 = fit_interval_exponential_msm(np.ones((6, 1)), d, t, weights=np.full(6, 2.0))
    assert np.allclose(fit.coef, fit2.coef, atol=1e-12)


def test_sandwich_matches_model_se_when_correct():
    X, y = logistic_data(10_000, np.array([-0.2, 0.6, 0.3]), 5)
    fit = fit_logistic(X, y)
    se = sandwich_se(fit, np.arange(10_000))
    assert np.all(np.abs(se / fit.model_se - 1) < 0.10)


def test_duplicating_individuals_shrinks_se_by_root_two():
    X, y = logistic_data(2000, np.array([-0.2, 0.6, 0.3]), 6)
    one = fit_logistic(X, y)
    se1 = sandwich_se(one, np.arange(2000))
    two = fit_logistic(np.vstack([X, X]), np.r_[y, y])
    se2 = sandwich_se(two, np.arange(4000))
    assert np.allclose(one.coef, two.coef, atol=1e-9)
    assert np.allclose(se1 / se2, np.sqrt(2), rtol=1e-8)


def test_bootstrap_determinism_and_constant_estimator():
    frame = pd.DataFrame({"id": np.repeat(np.arange(30), 2), "k": np.tile([0, 1], 30), "x": np.arange(60.0)})
    a, b = bootstrap_indices(frame["id"], 60, 11), bootstrap_indices(frame["id"], 60, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    res = bootstrap_ci(frame, lambda f: np.array([2.5]), B=60, seed=1)
    assert res.ci_low[0] == res.ci_high[0] == 2.5 and res.dropped == 0
    with pytest.raises(ValueError):
        bootstrap_ci(frame, lambda f: np.array([0.0]), B=10)


def test_bootstrap_counts_failed_resamples():
    frame = pd.DataFrame({"id": np.arange(40), "k": 0, "x": np.arange(40.0)})

    def flaky(f):
        return None if f["x"].iloc[0] < 20 else np.array([f["x"].mean()])

    res = bootstrap_ci(frame, flaky, B=80, seed=2)
    assert 0 < res.dropped < 80 and res.estimates.shape[0] == 80 - res.dropped


def test_lagged_and_cumulative_columns():
    frame = pd.DataFrame({"id": [0, 0, 0, 1, 1], "k": [0, 1, 2, 0, 1], "A": [1.0, 0.0, 1.0, 1.0, 1.0]})
    X, names = design_matrix(frame, [(Ref("A", 1),), (Cum("A", 1),)])
    assert names == ["(Intercept)", "A[-1]", "cum(A, 1)"]
    assert np.array_equal(np.isnan(X[:, 1]), [True, False, False, True, False])
    assert np.array_equal(X[:, 2], [0, 0, 1, 0, 1])


SURV = """
[study]
kind = survival
K = 3

[baseline]
Z = Bernoulli(0.5)

[covariate.L]
steps = Normal(0.5*Z, 1)

[treatment.A]
step0 = Bernoulli({p0})
steps = {trt}

[msm]
form = cox
lambda0 = 0.2
g = 0.3*Z - 0.5*A

[copulas]
L.default = Independence()
"""


def test_randomized_treatment_gives_unit_weights():
    scen = scenario_from(SURV.format(p0="0.5", trt="Point(A[-1])"))
    frame = simulate_survival(scen, 2000, seed=1).frame()
    wm = WeightModelSpec("A", ((Ref("Z"),),), ((Ref("Z"),),))
    w = stabilized_weights(frame, wm, degenerate_steps=[1, 2, 3])
    assert np.allclose(w, 1.0, atol=1e-12)


def test_weights_near_one_without_confounding():
    scen = scenario_from(SURV.format(p0="expit(-0.3 + 0.5*Z)", trt="Bernoulli(expit(-0.3 + 0.5*Z + A[-1]))"))
    frame = simulate_survival(scen, 10_000, seed=2).frame()
    wm = WeightModelSpec("A", ((Ref("Z"),), (Ref("A", 1),)), ((Ref("Z"),), (Ref("L"),), (Ref("A", 1),)))
    w = stabilized_weights(frame, wm)
    assert abs(w.mean() - 1) < 0.02


def test_stabilized_weights_have_unit_mean_in_drop_in_scenario(drop_in):
    scen = drop_in.scenario
    data = prepare_msm_data(scen, simulate_survival(scen, 10_000, seed=3).frame())
    fit = fit_msm(scen, data, drop_in.weight_models, weighted=True)
    assert abs(fit.weight_summary["mean"] - 1) < 0.05
    assert np.isfinite(fit.weight_summary["max"])


def test_treatment_hazard_ratio_recovered_without_drop_in(drop_in):
    scen = drop_in.scenario.with_regime({"S": 0})
    frame = simulate_survival(scen, 50_000, seed=4).frame()
    X = np.column_stack([np.ones(len(frame)), frame["A"]])
    fit = fit_interval_exponential_msm(X, frame["y"], np.minimum(frame["ytilde"], 1.0))
    se = sandwich_se(fit, frame["id"])
    assert abs(fit.coef[1] - np.log(0.83)) < 3 * se[1]
