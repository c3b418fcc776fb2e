import json

import numpy as np
import pandas as pd
import pytest

from msmsim.harness.cli import main
from msmsim.harness.config import ConfigError, load_config, parse_config_text
from msmsim.harness.io import read_frame
from msmsim.harness.oracle import run_oracle_margin
from msmsim.harness.simulate import run_simulate
from msmsim.harness.study import run_replication_study, run_replications, summarize

from .conftest import SCENARIOS

SMALL = """
[study]
kind = terminal
K = 2
n = 10
replications = 2
seed = 5

[params]
beta = -0.5

[baseline]
B = Bernoulli(0.3)

[covariate.L]
step0 = Normal(0.5*B, 1)
steps = Normal(0.5*B + 0.2*A[-1], 1)

[treatment.A]
step0 = Bernoulli(0.5)
steps = Bernoulli(expit(-0.2 + 0.5*L))

[msm]
outcome = Bernoulli(expit(-1 + 0.4*B + beta*cum(A)))

[copulas]
L.default = Gaussian(0.5)

[weights.A]
numerator = B + A[-1]
denominator = B + L + A[-1]
"""


@pytest.mark.parametrize("name", ["anemia.cfg", "drop_in.cfg", "two_confounders.cfg"])
def test_shipped_configs_round_trip(name):
    cfg = load_config(SCENARIOS / name)
    again = parse_config_text(cfg.canonical_text())
    assert again.canonical_text() == cfg.canonical_text()
    assert again.scenario == cfg.scenario


def test_future_reference_rejected():
    bad = SMALL.replace("steps = Normal(0.5*B + 0.2*A[-1], 1)", "steps = Normal(0.5*B + 0.2*L[1], 1)")
    with pytest.raises(ConfigError, match="future"):
        parse_config_text(bad)


def test_missing_copula_entry_rejected():
    text = SMALL.replace("[study]\nkind = terminal\nK = 2", "[study]\nkind = survival\nK = 3").replace(
        "[msm]\noutcome = Bernoulli(expit(-1 + 0.4*B + beta*cum(A)))", "[msm]\nform = cox\nlambda0 = 0.2\ng = beta*A"
    )
    entries = "\n".join(f"L[{k},{j}] = Gaussian(0.5)" for k in range(4) for j in range(k + 1) if (k, j) != (3, 1))
    text = text.replace("L.default = Gaussian(0.5)", entries)
    with pytest.raises(ConfigError, match=r"\(3, 1\)"):
        parse_config_text(text)


def test_unknown_key_reports_line():
    bad = SMALL.replace("seed = 5", "seed = 5\nsede = 6")
    with pytest.raises(ConfigError, match=r":8: \[study\] sede"):
        parse_config_text(bad, source="small.cfg")


def test_terminal_output_shapes(tmp_path):
    cfg = parse_config_text(SMALL)
    run_simulate(cfg, tmp_path, n=10, replications=1)
    pp = read_frame(tmp_path / "person_period.csv")
    oc = read_frame(tmp_path / "outcomes.csv")
    assert len(pp) == 30 and len(oc) == 10
    assert list(pp.columns) == ["id", "rep", "B", "k", "L", "A"]
    assert list(oc.columns) == ["id", "rep", "B", "y", "u_star"]


def test_rerun_is_byte_identical(tmp_path, drop_in):
    for sub in ("a", "b"):
        run_simulate(drop_in, tmp_path / sub, n=200, replications=2)
    for f in ("person_period.csv",):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["files"] == mb["files"]


def test_reader_round_trip_is_exact(tmp_path, two_confounders):
    from msmsim.harness.simulate import simulate_frames

    pp, _, _ = simulate_frames(two_confounders.scenario, 100, 3, 0)
    run_simulate(two_confounders, tmp_path, n=100, replications=1, seed=3)
    back = read_frame(tmp_path / "person_period.csv")
    pd.testing.assert_frame_equal(back, pp, check_dtype=False, check_exact=True)


def test_oracle_independence_passes():
    cfg = parse_config_text(SMALL.replace("Gaussian(0.5)", "Independence()"))
    report = run_oracle_margin(cfg.scenario, [{"A": 1}, {"A": 0}], 20_000, seed=1)
    assert len(report) == 4 and report["passed"].all()


def test_single_replication_flags_mc_se():
    cfg = parse_config_text(SMALL.replace("n = 10", "n = 300"))
    summary = summarize(cfg, run_replications(cfg, replications=1))
    assert not summary["mc_se_defined"].any()
    assert summary["mc_se"].isna().all() and np.isfinite(summary["bias"]).all()


def test_parallel_equals_serial(tmp_path):
    cfg = parse_config_text(SMALL.replace("n = 10", "n = 300").replace("replications = 2", "replications = 4"))
    serial = run_replication_study(cfg, tmp_path / "s", threads=1)
    parallel = run_replication_study(cfg, tmp_path / "p", threads=2)
    pd.testing.assert_frame_equal(serial, parallel)
    assert (tmp_path / "s" / "replications.csv").read_bytes() == (tmp_path / "p" / "replications.csv").read_bytes()


def test_grid_cells_and_overrides(anemia):
    cells = anemia.cells()
    assert [c[0]["beta"] for c in cells] == [-0.5, -0.3, 0.0]
    assert anemia.scenario_hash({"beta": 0.0}) != anemia.scenario_hash()


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "small.cfg"
    good.write_text(SMALL)
    assert main(["validate", str(good)]) == 0
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL.replace("Gaussian(0.5)", "Gaussian(1.5)"))
    assert main(["validate", str(bad)]) == 2
    assert main(["simulate", str(good), "--out", str(tmp_path / "sim"), "--param", "gamma=1"]) == 2
    assert main(["simulate", str(good), "--out", str(tmp_path / "sim"), "--n", "50"]) == 0
    assert main(["estimate", str(tmp_path / "missing.csv"), str(good)]) == 3
    assert main(["oracle", str(good), "--regime", "A=1", "--n", "2000", "--out", str(tmp_path / "or")]) == 0
    assert (tmp_path / "or" / "oracle_report.csv").exists()
    capsys.readouterr()


def test_cli_estimate_reads_simulated_data(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL)
    assert main(["simulate", str(cfg), "--out", str(tmp_path), "--n", "400", "--replications", "1"]) == 0
    assert main(["estimate", str(tmp_path / "person_period.csv"), str(cfg), "--out", str(tmp_path)]) == 0
    est = read_frame(tmp_path / "estimates.csv")
    assert set(est["estimator"]) == {"iptw", "unweighted"}
    assert set(est["coefficient"]) == {"(Intercept)", "B", "cum(A)"}
    capsys.readouterr()
