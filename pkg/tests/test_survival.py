import numpy as np
import pytest
from scipy import integrate, stats

from msmsim.copulas import Clayton, Frank, Gaussian, Independence, StudentT, copula_cdf, density, h, h_inv
from msmsim.survival import (
    DegenerateSurvivalError, invert_msm_incremental, renormalize_survivor_quantile, simulate_competing,
    simulate_survival, simulate_survival_individual, unweave_incremental, update_q,
)

from .conftest import scenario_from

TOY = """
[study]
kind = survival
K = {K}

[params]
lam = {lam}

[baseline]
Z = Bernoulli(0.5)

[covariate.L]
step0 = Normal(0.3*Z, 1)
steps = Normal(0.5*L[-1] - 0.4*A[-1], 1)

[treatment.A]
steps = Bernoulli(expit(-0.3 + 0.8*L))

[msm]
form = cox
lambda0 = lam
g = 0.4*Z - 0.7*A

[copulas]
{copulas}
{extra}
"""


def toy(K=3, lam=0.3, copulas="L.default = Gaussian(0.6)", extra=""):
    return scenario_from(TOY.format(K=K, lam=lam, copulas=copulas, extra=extra))


def sample_pair(c, n, seed):
    """(U_L, U_Y) from copula c: U_Y | U_L = v by inverting h(., v)."""
    rng = np.random.default_rng(seed)
    v = rng.random(n)
    return v, h_inv(c, np.clip(rng.random(n), 1e-12, 1 - 1e-12), np.clip(v, 1e-12, 1 - 1e-12))


# --- survivor renormalization ------------------------------------------------------

def test_independence_renormalization_is_identity():
    assert renormalize_survivor_quantile(Independence(), 0.37, 0.6) == pytest.approx(0.37, abs=1e-15)


@pytest.mark.parametrize("c", [Gaussian(0.8), StudentT(-0.5, 5), Clayton(3.0), Frank(-10.0)], ids=str)
def test_negligible_failure_mass_leaves_quantile(c):
    assert renormalize_survivor_quantile(c, 0.42, 1e-15) == pytest.approx(0.42, abs=1e-12)


def test_renormalization_matches_rejection_sampling():
    c, v, q = StudentT(-0.5, 5), 0.6, 0.2
    uL, uY = sample_pair(c, 1_000_000, seed=7)
    keep = uY > q
    emp = np.mean(uL[keep] <= v)
    se = np.sqrt(emp * (1 - emp) / keep.sum())
    assert abs(renormalize_survivor_quantile(c, v, q) - emp) < 3 * se


def test_survivors_below_form():
    c, v, q = Gaussian(0.5), 0.3, 0.7
    uL, uY = sample_pair(c, 1_000_000, seed=9)
    keep = uY <= q
    emp = np.mean(uL[keep] <= v)
    se = np.sqrt(emp * (1 - emp) / keep.sum())
    out = renormalize_survivor_quantile(c, v, q, survivors_below=True)
    assert out == pytest.approx(copula_cdf(c, v, q) / q, abs=1e-15)
    assert abs(out - emp) < 3 * se


def test_degenerate_survival_raises():
    with pytest.raises(DegenerateSurvivalError):
        renormalize_survivor_quantile(Gaussian(0.5), 0.5, 1 - 1e-13)


# --- q recursion and inversion -----------------------------------------------------

def test_update_q():
    assert update_q(Independence(), 0.3, 0.9) == pytest.approx(0.3)
    assert update_q(Gaussian(0.5), 0.3, 0.6) == h(Gaussian(0.5), 0.3, 0.6)


def test_unweave_incremental_independence_and_base_case():
    assert unweave_incremental([Independence()] * 3, 0.41, np.array([0.2, 0.5, 0.9])) == pytest.approx(0.41)
    c = Frank(4.0)
    assert unweave_incremental([c], 0.41, np.array([0.2])) == h_inv(c, 0.41, 0.2)


def test_inversion_closed_forms():
    scen = toy()
    msm = scen.msm
    hist = {"Z": np.array([0.0]), "A": np.array([0.0])}
    r = 0.3
    y, fail = invert_msm_incremental(msm, 1 - np.exp(-r), hist)
    assert float(y[0]) == pytest.approx(1.0, abs=1e-14)
    y, _ = invert_msm_incremental(msm, 1e-300, hist)
    assert 0 < float(y[0]) < 1e-290


def test_treated_arm_median_without_drop_in(drop_in):
    scen = drop_in.scenario
    hist = {"B": np.array([1.0]), "L": np.array([7.0]), "A": np.array([1.0]), "S": np.array([0.0])}
    y, _ = scen.msm.invert(0.5, hist, 1)
    lam0 = -np.log(1 - 0.035) / 2
    assert float(y[0]) == pytest.approx(np.log(2) / (lam0 * 0.83), rel=1e-12)


# --- engine ---------------------------------------------------------------------------

ENTRIES = "L[0,0] = Gaussian(0.6)\nL[1,0] = Gaussian(-0.4)\nL[1,1] = StudentT(0.5, 4)"


def test_base_case_formulas():
    scen = toy(K=1, copulas=ENTRIES)
    data = simulate_survival(scen, 4000, seed=3, trace=True)
    lay = scen.layout
    d = data.draws
    z = data.history.base["Z"]
    a0 = data.history.proc["A"][:, 0]
    r0 = 0.3 * np.exp(0.4 * z - 0.7 * a0)
    u1 = h_inv(Gaussian(0.6), d[:, lay[(0, "@outcome")]], d[:, lay[(0, "L")]])
    assert np.allclose(data.ytilde[:, 0], -np.log1p(-u1) / r0, rtol=1e-12, atol=0)
    surv = data.at_risk[:, 1]
    q0 = -np.expm1(-r0[surv])
    v0 = d[surv, lay[(0, "L")]]
    expected = (v0 - copula_cdf(Gaussian(0.6), v0, q0)) / (1 - q0)
    assert np.allclose(data.state.v[surv, 0], expected, rtol=0, atol=1e-12)


def test_second_interval_against_quadrature():
    scen = toy(K=1, copulas=ENTRIES)
    data = simulate_survival(scen, 300, seed=12, trace=True)
    lay = scen.layout
    idx = np.flatnonzero(data.at_risk[:, 1])[:5]
    c00 = Gaussian(0.6)
    for i in idx:
        d = data.draws[i]
        z, a0, a1 = data.history.base["Z"][i], *data.history.proc["A"][i]
        q0 = -np.expm1(-0.3 * np.exp(0.4 * z - 0.7 * a0))
        v0 = d[lay[(0, "L")]]
        mass = integrate.dblquad(lambda u, v: density(c00, v, u), 0, v0, q0, 1, epsabs=1e-12, epsrel=1e-12)[0]
        v0_surv = mass / (1 - q0)
        u2 = h_inv(Gaussian(-0.4), h_inv(StudentT(0.5, 4), d[lay[(1, "@outcome")]], d[lay[(1, "L")]]), v0_surv)
        r1 = 0.3 * np.exp(0.4 * z - 0.7 * a1)
        assert data.ytilde[i, 1] == pytest.approx(-np.log1p(-u2) / r1, rel=1e-4)


@pytest.mark.parametrize("copulas", ["L.default = StudentT(0.8, 4)", "L.default = Clayton(3)"])
def test_exact_margin_per_step_under_strong_dependence(copulas):
    scen = toy(K=3, lam=0.25, copulas=copulas).with_regime({"A": [1, 1, 0, 1]})
    data = simulate_survival(scen, 100_000, seed=31)
    z = data.history.base["Z"]
    for k in range(4):
        a = [1, 1, 0, 1][k]
        for zval in (0.0, 1.0):
            m = data.at_risk[:, k] & (z == zval)
            rate = 0.25 * np.exp(0.4 * zval - 0.7 * a)
            assert stats.kstest(data.ytilde[m, k], stats.expon(scale=1 / rate).cdf).pvalue > 0.01


def test_individual_equals_population_row_and_truncation():
    scen = toy(K=4, lam=0.6)
    pop = simulate_survival(scen, 300, seed=5)
    for i in (0, 17, 299):
        one = simulate_survival_individual(scen, 5, individual=i)
        steps = np.flatnonzero(pop.at_risk[i])
        assert np.array_equal(one.ytilde, pop.ytilde[i, : steps.max() + 1])
    frame = pop.frame()
    last = frame.groupby("id")["k"].max()
    failed = frame[frame["y"] == 1].set_index("id")["k"]
    assert (last.loc[failed.index] == failed).all()
    assert (frame.groupby("id").size() <= 5).all()


def test_huge_baseline_hazard_ends_everyone_at_first_step():
    data = simulate_survival(toy(K=3, lam=1e6), 1000, seed=1)
    assert data.at_risk[:, 0].all() and not data.at_risk[:, 1:].any()
    assert data.y[:, 0].all()


def test_evaluation_counter_univariate(drop_in):
    scen = drop_in.scenario
    data = simulate_survival(scen, 400, seed=2, count=True)
    K = scen.K
    for k in range(K):
        rows = data.at_risk[:, k] & data.at_risk[:, k + 1]
        assert (data.counter.counts[rows, k] == 3 * k + 5).all()


def test_evaluation_counter_two_processes(two_confounders):
    scen = two_confounders.scenario_for({"beta_C": 0.0, "beta_A": 0.0, "beta_CA": 0.0})
    data = simulate_survival(scen, 400, seed=2, count=True)
    K, p = scen.K, 2
    full = data.at_risk[:, K]
    assert full.any()
    # the closed form covers the K intervals that prepare failure quantiles (steps 0..K-1)
    assert (data.counter.counts[full, :K].sum(axis=1) == K * (3 * K + 1) * p // 2 + 3 * K).all()


COMPETING_ZERO = "[competing]\nmode = conditional\nlaw = Bernoulli(0)\n"
COMPETING_MSM = """
[competing]
mode = msm
form = cox
lambda0 = 0.2
g = 0.5*Z

[competing.copulas]
L.default = Independence()
"""


def test_zero_competing_hazard_changes_nothing():
    base = toy(K=3)
    comp = toy(K=3, extra=COMPETING_ZERO)
    for i in range(20):
        a = simulate_survival_individual(base, 9, individual=i)
        b = simulate_competing(comp, 9, individual=i)
        assert np.array_equal(a.ytilde, b.ytilde) and a.event_type == b.event_type


def test_competing_msm_cause_specific_hazards():
    scen = toy(K=2, lam=0.3, copulas="L.default = Independence()", extra=COMPETING_MSM).with_regime({"A": 0})
    data = simulate_survival(scen, 100_000, seed=6)
    frame = data.frame()
    z = frame["Z"].to_numpy()
    exposure = np.minimum(np.minimum(frame["ytilde"], frame["dtilde"]), 1.0).to_numpy()
    for zval in (0.0, 1.0):
        m = z == zval
        for kind, rate in ((1, 0.3 * np.exp(0.4 * zval)), (2, 0.2 * np.exp(0.5 * zval))):
            events = (frame["event_type"].to_numpy()[m] == kind).sum()
            est = events / exposure[m].sum()
            assert abs(est - rate) < 3 * est / np.sqrt(events)
    event_step = frame[frame["event_type"] > 0].set_index("id")["k"]
    last_step = frame.groupby("id")["k"].max()
    assert (last_step.loc[event_step.index] == event_step).all()
