import json
import math
import os

import numpy as np
import pytest
from scipy import stats

from exitlab.harness import (SCENARIOS, ExperimentConfig, TestReport,
                             binomial_sign_test, domain_from_config, ks_test,
                             run_experiment)


def _std_normal_cdf(t):
    return stats.norm.cdf(t)


def test_ks_null_distribution_median_p():
    gen = np.random.default_rng(2)
    ps = []
    for _ in range(100):
        ps.append(ks_test(gen.standard_normal(10_000), _std_normal_cdf)[1])
    med = float(np.median(ps))
    assert 0.3 <= med <= 0.7


def test_ks_power_against_shift():
    gen = np.random.default_rng(3)
    stat, p = ks_test(gen.standard_normal(10_000) + 1.0, _std_normal_cdf)
    assert p < 1e-6


def test_ks_input_validation():
    with pytest.raises(ValueError):
        ks_test([], _std_normal_cdf)
    with pytest.raises(ValueError):
        ks_test(np.zeros(10), _std_normal_cdf)  # below 50 samples
    gen = np.random.default_rng(4)
    with pytest.raises(ValueError):
        ks_test(gen.standard_normal(100), lambda t: -np.asarray(t))


def test_binomial_sign_test_values():
    assert binomial_sign_test(50, 100, 0.5) == pytest.approx(1.0, abs=1e-9)
    # two-sided all-misses probability 2 * 0.5^100
    assert binomial_sign_test(0, 100, 0.5) == pytest.approx(2.0 * 0.5 ** 100,
                                                            rel=1e-9)
    with pytest.raises(ValueError):
        binomial_sign_test(0, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="simulate", eps=[1e-2], paths=50)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="simulate", eps=[1e-3, 1e-2], paths=200)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario="simulate", eps=[-1.0], paths=200)
    cfg = ExperimentConfig(scenario="simulate", eps=[1e-1, 1e-2], paths=200,
                           dt={"kind": "scaled", "c": 0.2})
    assert cfg.dt_for(0.1) == pytest.approx(0.002)


def test_unknown_scenario_rejected():
    cfg = ExperimentConfig(scenario="nope", eps=[0.1], paths=100)
    with pytest.raises(ValueError):
        run_experiment(cfg)


def _small_saddle_config(out=None, workers=1, seed=11):
    return ExperimentConfig(
        scenario="linear-saddle-exit", eps=[1e-2], paths=800, seed=seed,
        params={"lp": 1.0, "lm": 1.0, "delta": 0.5, "y2": 0.25, "dt": 2e-3},
        out=out, workers=workers)


def test_run_experiment_report_structure(tmp_path):
    out = str(tmp_path / "run")
    rep = run_experiment(_small_saddle_config(out=out))
    assert rep.passed
    assert rep.schema_version == 1
    assert rep.cells[0]["summary"]["sign_freq"] == pytest.approx(0.5, abs=0.08)
    data = json.loads((tmp_path / "run" / "report.json").read_text())
    assert data["scenario"] == "linear-saddle-exit"
    assert os.path.exists(tmp_path / "run" / "linear-saddle-exit_eps0.csv")


def test_bit_reproducibility_of_csv(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    run_experiment(_small_saddle_config(out=a))
    run_experiment(_small_saddle_config(out=b))
    fa = open(os.path.join(a, "linear-saddle-exit_eps0.csv"), "rb").read()
    fb = open(os.path.join(b, "linear-saddle-exit_eps0.csv"), "rb").read()
    assert fa == fb


def test_worker_count_independence(tmp_path):
    cfg1 = ExperimentConfig(
        scenario="linear-saddle-exit", eps=[2e-2, 1e-2], paths=500, seed=4,
        params={"lp": 1.0, "lm": 2.0, "delta": 0.5, "y2": 0.25, "dt": 2e-3},
        out=str(tmp_path / "w1"), workers=1)
    cfg4 = ExperimentConfig(
        scenario="linear-saddle-exit", eps=[2e-2, 1e-2], paths=500, seed=4,
        params={"lp": 1.0, "lm": 2.0, "delta": 0.5, "y2": 0.25, "dt": 2e-3},
        out=str(tmp_path / "w4"), workers=4)
    r1 = run_experiment(cfg1)
    r4 = run_experiment(cfg4)
    for i in range(2):
        fa = open(tmp_path / "w1" / f"linear-saddle-exit_eps{i}.csv", "rb").read()
        fb = open(tmp_path / "w4" / f"linear-saddle-exit_eps{i}.csv", "rb").read()
        assert fa == fb
    assert [c["summary"] for c in r1.cells] == [c["summary"] for c in r4.cells]


def test_fault_isolation_between_cells(tmp_path):
    calls = {}

    def flaky(cfg, eps, seed):
        if eps < 0.05:
            raise RuntimeError("boom")
        return {"samples": {"x": np.zeros(3)}, "summary": {"ok": 1},
                "tests": []}

    SCENARIOS["_flaky"] = flaky
    try:
        cfg = ExperimentConfig(scenario="_flaky", eps=[0.1, 0.01], paths=100,
                               out=str(tmp_path))
        rep = run_experiment(cfg)
    finally:
        del SCENARIOS["_flaky"]
    assert not rep.passed
    assert rep.cells[0]["error"] is None
    assert "boom" in rep.cells[1]["error"]
    assert rep.cells[0]["summary"] == {"ok": 1}


def test_degenerate_noiseless_simulation():
    cfg = ExperimentConfig(
        scenario="simulate", eps=[1e-6], paths=100, seed=0,
        field={"name": "constant-drift-1d", "params": {"c": 1.0}},
        domain={"kind": "box", "lo": [-1.0], "hi": [1.0]},
        params={"sigma": [[0.0]], "x0": [0.0]},
        dt={"kind": "absolute", "value": 1e-3})
    rep = run_experiment(cfg)
    tests = rep.cells[0]["tests"]
    assert tests and tests[0]["passed"] is None
    assert "degenerate" in tests[0]["detail"]
    assert rep.cells[0]["summary"]["mean_tau"] == pytest.approx(1.0, abs=5e-3)


def test_domain_from_config_kinds():
    d = domain_from_config({"kind": "box", "lo": [0], "hi": [1]})
    assert d.kind == "box"
    d = domain_from_config({"kind": "ball", "center": [0, 0], "radius": 2.0})
    assert d.kind == "ball"
    with pytest.raises(ValueError):
        domain_from_config({"kind": "implicit"})


def test_report_json_round_trip():
    rep = TestReport(scenario="x", config={}, cells=[], passed=True,
                     runtime_s=0.1, code_version="test")
    data = json.loads(rep.to_json())
    assert data["passed"] is True and data["schema_version"] == 1
