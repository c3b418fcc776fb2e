import numpy as np
import pytest
from scipy import stats

from msmsim.copulas import Gaussian, h, h_inv
from msmsim.frugal import simulate_individual, simulate_population, unweave_outcome

from .conftest import scenario_from

TOY = """
[study]
kind = terminal
K = {K}

[baseline]
Z = Bernoulli(0.4)

[covariate.L]
step0 = Normal(0.5*Z, 1)
steps = Normal(0.6*L[-1] + 0.4*A[-1], 1)

[treatment.A]
steps = Bernoulli(expit(-0.5 + L))

[msm]
outcome = {outcome}

[copulas]
L.default = {copula}
"""


def toy(K=1, copula="Gaussian(0.6)", outcome="Bernoulli(expit(-1 + 0.3*Z + 0.8*cum(A)))"):
    return scenario_from(TOY.format(K=K, copula=copula, outcome=outcome))


def test_independence_unweaving_is_identity():
    scen = toy(K=3, copula="Independence()")
    data = simulate_population(scen, 500, seed=3, trace=True)
    w_y = data.draws[:, scen.layout[("final", "@outcome")]]
    assert np.array_equal(data.u_star, w_y)


def test_single_step_reduces_to_one_inverse_h():
    scen = toy(K=0, copula="Gaussian(0.45)")
    data = simulate_population(scen, 200, seed=5, trace=True)
    w_y = data.draws[:, scen.layout[("final", "@outcome")]]
    w_l = data.draws[:, scen.layout[(0, "L")]]
    assert np.allclose(data.u_star, h_inv(Gaussian(0.45), w_y, w_l), atol=0, rtol=0)


def test_unweaving_runs_from_last_step_back():
    scen = toy(K=2, copula="Gaussian(-0.5)")
    draws = {"L": np.array([[0.2, 0.7, 0.4]])}
    u = unweave_outcome(scen, draws, np.array([0.35]))
    c = Gaussian(-0.5)
    fwd = h(c, h(c, h(c, u, 0.2), 0.7), 0.4)
    assert fwd == pytest.approx(0.35, abs=1e-12)


def test_individual_equals_population_row():
    scen = toy(K=3)
    pop = simulate_population(scen, 50, seed=11, rep=2)
    one = simulate_individual(scen, 11, individual=37, rep=2)
    assert one.y == pop.y[37] and one.u_star == pop.u_star[37]
    assert np.array_equal(one.covariates["L"], pop.history.proc["L"][37])


def test_same_seed_is_bit_identical():
    scen = toy(K=3)
    a = simulate_population(scen, 100, seed=1).person_period_frame()
    b = simulate_population(scen, 100, seed=1).person_period_frame()
    assert a.equals(b)


def test_marginal_quantiles_are_uniform():
    scen = toy(K=3, copula="StudentT(0.7, 4)")
    data = simulate_population(scen, 100_000, seed=21)
    assert stats.kstest(data.u_star, "uniform").pvalue > 0.01


def test_margin_under_fixed_regime_with_independence():
    scen = toy(K=2, copula="Independence()").with_regime({"A": 1})
    data = simulate_population(scen, 200_000, seed=4)
    z = data.history.base["Z"]
    for zval in (0.0, 1.0):
        m = z == zval
        p = 1 / (1 + np.exp(-(-1 + 0.3 * zval + 0.8 * 3)))
        se = np.sqrt(p * (1 - p) / m.sum())
        assert abs(data.y[m].mean() - p) < 3 * se


def test_margin_under_fixed_regime_with_strong_dependence():
    scen = toy(K=2, copula="Gaussian(-0.8)", outcome="Normal(1 + 0.3*Z - 0.5*cum(A), 2)").with_regime({"A": [1, 0, 1]})
    data = simulate_population(scen, 100_000, seed=8)
    z = data.history.base["Z"]
    for zval in (0.0, 1.0):
        m = z == zval
        law = stats.norm(1 + 0.3 * zval - 1.0, 2)
        assert stats.kstest(data.y[m], law.cdf).pvalue > 0.01


def test_dependence_shows_up_in_treated_subgroup():
    # without a regime, the outcome depends on L and so on treatment assignment
    scen = toy(K=1, copula="Gaussian(0.9)")
    data = simulate_population(scen, 50_000, seed=2)
    a0 = data.history.proc["A"][:, 0]
    assert data.u_star[a0 == 1].mean() - data.u_star[a0 == 0].mean() > 0.05


def test_latent_process_hidden_unless_traced():
    text = TOY.format(K=1, copula="Gaussian(0.3)", outcome="Bernoulli(0.5)").replace(
        "[covariate.L]", "[covariate.U]\nlatent = true\nsteps = Normal(0, 1)\n\n[covariate.L]"
    ) + "U.default = Gaussian(0.2)\n"
    scen = scenario_from(text)
    data = simulate_population(scen, 10, seed=0)
    assert "U" not in data.person_period_frame().columns
    assert "U" in data.person_period_frame(include_latent=True).columns
