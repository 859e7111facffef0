"""Monte Carlo experiment runner, statistical tests, and reports.

An :class:`ExperimentConfig` names a scenario, a noise-level list, a
path count, and a master seed; :func:`run_experiment` simulates every
``(eps, paths)`` cell (cells run in a thread pool, each cell pure and
seeded independently of worker count), computes the scenario's rescaled
statistics, tests them against the predicted limit laws, and writes one
CSV per cell plus a versioned JSON report.  Reports embed the resolved
config, and identical configs produce byte-identical CSV output.

Scenario names: ``linear-saddle-exit``, ``day-density``,
``levinson-constant-drift``, ``condition1d``, ``two-node``,
``quasipotential-double-well``, ``simulate``.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
from scipy import integrate, special, stats

from . import fields, geometry, hetero, ldp, levinson, saddle
from .rng import MASK64, normalize_seed
from .sde import (InitialLaw, SdeSystem, simulate_exit_batch,
                  simulate_exit_batch_table1d,
                  simulate_linear_saddle_exact_batch)

SCHEMA_VERSION = 1


# ----------------------------------------------------------------------
# Statistical tests
# ----------------------------------------------------------------------

def ks_test(samples, cdf) -> tuple[float, float]:
    """One-sample two-sided Kolmogorov-Smirnov test, asymptotic p-value.

    ``cdf`` must be nondecreasing over the sample range (probed on the
    sorted samples).  Requires at least 50 samples.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 50:
        raise ValueError(f"need at least 50 samples, got {n}")
    F = np.asarray(cdf(x), dtype=float)
    if np.any(np.diff(F) < -1e-10):
        raise ValueError("cdf probe is not monotone on the sample range")
    if np.any((F < -1e-9) | (F > 1 + 1e-9)):
        raise ValueError("cdf probe left [0, 1]")
    grid = np.arange(1, n + 1) / n
    d = float(max(np.max(grid - F), np.max(F - (grid - 1.0 / n))))
    p = float(special.kolmogorov(d * math.sqrt(n)))
    return d, p


def binomial_sign_test(k_plus: int, n: int, p0: float = 0.5) -> float:
    """Exact two-sided binomial test p-value."""
    if n <= 0:
        raise ValueError("need n > 0")
    if not 0 <= k_plus <= n:
        raise ValueError("need 0 <= k <= n")
    return float(stats.binomtest(int(k_plus), int(n), p0).pvalue)


# ----------------------------------------------------------------------
# Config and report
# ----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    scenario: str
    eps: list
    paths: int = 1000
    seed: int = 0
    dt: dict = dc_field(default_factory=lambda: {"kind": "scaled", "c": 0.1})
    field: dict | None = None
    domain: dict | None = None
    params: dict = dc_field(default_factory=dict)
    levels: dict = dc_field(default_factory=lambda: {"ks": 0.01, "sign": 0.01,
                                                     "binom_sigmas": 3.0})
    out: str | None = None
    workers: int = 1

    def __post_init__(self):
        eps = [float(e) for e in self.eps]
        if any(e <= 0 for e in eps):
            raise ValueError("eps values must be positive")
        if list(eps) != sorted(eps, reverse=True) or len(set(eps)) != len(eps):
            raise ValueError("eps list must be positive decreasing")
        if self.paths < 100:
            raise ValueError("path count must be at least 100")
        self.eps = eps
        self.seed = normalize_seed(self.seed)

    def dt_for(self, eps: float) -> float:
        if self.dt.get("kind") == "absolute":
            return float(self.dt["value"])
        return float(self.dt.get("c", 0.1)) * eps ** 2

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig(**json.loads(text))

    def cell_seed(self, eps_index: int) -> int:
        return (self.seed ^ ((eps_index + 1) * 0xD1342543DE82EF95)) & MASK64


@dataclass
class TestOutcome:
    __test__ = False  # not a pytest collectible

    name: str
    kind: str          # "ks" | "sign" | "band" | "rel" | "info"
    statistic: float
    p_value: float | None
    passed: bool | None  # None = informational / degenerate
    detail: str = ""

    def to_dict(self):
        return asdict(self)


@dataclass
class TestReport:
    __test__ = False  # not a pytest collectible

    scenario: str
    config: dict
    cells: list
    passed: bool
    runtime_s: float
    code_version: str
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps({
            "schema_version": self.schema_version,
            "scenario": self.scenario,
            "passed": self.passed,
            "runtime_s": self.runtime_s,
            "code_version": self.code_version,
            "config": self.config,
            "cells": self.cells,
        }, indent=2)


def _code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=os.path.dirname(__file__))
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    from . import __version__

    return f"exitlab-{__version__}"


def domain_from_config(cfg: dict) -> geometry.DomainSpec:
    kind = cfg["kind"]
    if kind == "box":
        return geometry.DomainSpec.box(cfg["lo"], cfg["hi"])
    if kind == "ball":
        return geometry.DomainSpec.ball(cfg["center"], cfg["radius"])
    if kind == "polygon":
        return geometry.DomainSpec.polygon(cfg["vertices"])
    raise ValueError(f"unsupported domain kind {kind!r} in config")


# ----------------------------------------------------------------------
# Scenario cells
# ----------------------------------------------------------------------

def _norm_cdf_scaled(var: float):
    sd = math.sqrt(var)
    return lambda t: 0.5 * (1.0 + special.erf(np.asarray(t, float) / (sd * math.sqrt(2))))


def _cell_linear_saddle(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    p = cfg.params
    lp, lm = float(p.get("lp", 1.0)), float(p.get("lm", 1.0))
    delta = float(p.get("delta", 0.5))
    y2 = float(p.get("y2", 0.25))
    kappa = p.get("kappa")
    dt = cfg.dt_for(eps) if cfg.dt.get("kind") == "absolute" else \
        float(p.get("dt", 1e-3))
    batch = simulate_linear_saddle_exact_batch(lp, lm, eps, y2, delta, dt,
                                               seed, cfg.paths)
    spec = saddle.SaddleSpec(lp=lp, lm=lm, delta=delta, alpha=1.0, y2=y2,
                             kappa=kappa)
    eta = saddle.eta_plus_law(spec)
    tlaw = saddle.exit_time_shift_law(spec, eta)
    thlaw = saddle.theta_law(spec, eta)
    beta = saddle.beta_exponent(1.0, lp, lm)

    sign = np.sign(batch.exit_points[:, 0])
    k_plus = int(np.sum(sign > 0))
    time_shift = batch.tau + math.log(eps) / lp
    transverse = batch.exit_points[:, 1] / eps ** beta

    tests = []
    p_sign = binomial_sign_test(k_plus, len(batch), 0.5)
    tests.append(TestOutcome("sign-symmetry", "sign", k_plus / len(batch),
                             p_sign, p_sign >= cfg.levels["sign"],
                             f"P(+delta) = {k_plus / len(batch):.4f}"))
    d, pv = ks_test(time_shift, tlaw.cdf)
    tests.append(TestOutcome("time-shift-ks", "ks", d, pv,
                             pv >= cfg.levels["ks"],
                             "tau + log(eps)/lp vs log(delta/|eta+|) law"))
    d2, pv2 = ks_test(transverse, thlaw.cdf)
    tests.append(TestOutcome("transverse-ks", "ks", d2, pv2,
                             pv2 >= cfg.levels["ks"],
                             f"eps^-beta x2(tau) vs theta law (beta={beta:g})"))
    return {
        "samples": {"tau": batch.tau, "time_shift": time_shift,
                    "transverse_rescaled": transverse, "sign": sign,
                    "N_eps": batch.extra["N_eps"]},
        "summary": {"sign_freq": k_plus / len(batch),
                    "mean_tau": float(batch.tau.mean()), "beta": beta,
                    "dt": dt},
        "tests": tests,
    }


def _cell_day_density(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    p = cfg.params
    lp = float(p.get("lp", 1.0))
    delta = float(p.get("delta", 1.0))
    y2 = float(p.get("y2", 0.25))
    dt = float(p.get("dt", 1e-3))
    batch = simulate_linear_saddle_exact_batch(lp, lp, eps, y2, delta, dt,
                                               seed, cfg.paths)
    stat = lp * batch.tau + math.log(eps) - lp * math.log(delta)
    d, pv = ks_test(stat, saddle.day_cdf)
    tests = [TestOutcome("day-density-ks", "ks", d, pv,
                         pv >= cfg.levels["ks"],
                         "lp*tau + log(eps) vs the closed-form density")]
    return {"samples": {"rescaled_time": stat},
            "summary": {"mean": float(stat.mean()), "dt": dt},
            "tests": tests}


def _cell_levinson(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    p = cfg.params
    dim = int(p.get("dim", 2))
    L = float(p.get("boundary", 1.0))
    span = float(p.get("span", 8.0))
    x0 = np.zeros(dim)
    field = fields.constant_drift([1.0] + [0.0] * (dim - 1))
    domain = geometry.DomainSpec.box([-span] * dim,
                                     [L] + [span] * (dim - 1))
    pert = levinson.PerturbationSpec(alpha1=float(p.get("alpha1", 1.0)),
                                     alpha2=float(p.get("alpha2", 1.0)))
    law = levinson.exit_correction_law(field, domain, x0, pert,
                                       grid_dt=min(1e-3, cfg.dt_for(eps)))
    T = law.T
    _, cov = law.gaussian_params()

    system = SdeSystem(field=field, sigma=np.eye(dim),
                       initial=InitialLaw(x0=x0))
    dt = cfg.dt_for(eps)
    batch = simulate_exit_batch(system, domain, eps, dt, seed, cfg.paths)
    keep = batch.crossed & (batch.face_ids == 2 * 0 + 1)
    time_stat = (batch.tau[keep] - T) / eps
    tang_stat = (batch.exit_points[keep, 1] - 0.0) / eps

    tests = []
    d, pv = ks_test(time_stat, _norm_cdf_scaled(cov[0, 0]))
    tests.append(TestOutcome("time-ks", "ks", d, pv, pv >= cfg.levels["ks"],
                             f"eps^-1 (tau - T) vs N(0, {cov[0, 0]:.4g})"))
    d2, pv2 = ks_test(tang_stat, _norm_cdf_scaled(cov[1, 1]))
    tests.append(TestOutcome("tangent-ks", "ks", d2, pv2,
                             pv2 >= cfg.levels["ks"],
                             f"eps^-1 tangent vs N(0, {cov[1, 1]:.4g})"))
    emp = np.cov(np.stack([time_stat, tang_stat]))
    rel_tol = float(p.get("cov_rel_tol", 0.05))
    for (i, j, want) in ((0, 0, cov[0, 0]), (1, 1, cov[1, 1])):
        err = abs(emp[i, j] - want) / want
        tests.append(TestOutcome(f"cov[{i}{j}]", "rel", err, None,
                                 err <= rel_tol,
                                 f"empirical {emp[i, j]:.4g} vs {want:.4g}"))
    off = abs(emp[0, 1]) / math.sqrt(cov[0, 0] * cov[1, 1])
    tests.append(TestOutcome("cov[01]", "rel", off, None, off <= rel_tol,
                             f"normalized cross-covariance {off:.4g}"))
    return {"samples": {"time_rescaled": time_stat, "tangent_rescaled": tang_stat},
            "summary": {"T": T, "kept": int(keep.sum()), "dt": dt,
                        "cov_time": float(emp[0, 0]),
                        "cov_tan": float(emp[1, 1])},
            "tests": tests}


def _b_fn_from_params(p: dict):
    spec = p.get("b", {"kind": "poly1d", "coeffs": [-1.0]})
    if callable(spec):
        return spec
    coeffs = np.asarray(spec["coeffs"], dtype=float)

    def b(y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for k in range(coeffs.size - 1, -1, -1):
            out = out * y + coeffs[k]
        return out

    return b


def _cell_condition1d(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    p = cfg.params
    a1, a2 = float(p.get("a1", -1.0)), float(p.get("a2", 1.0))
    x0 = float(p.get("x0", 0.0))
    sigma = float(p.get("sigma", 1.0))
    b = _b_fn_from_params(p)
    T, _ = integrate.quad(lambda y: -1.0 / float(b(y)), x0, a2,
                          epsabs=1e-12, limit=200)
    var = levinson.conditioned_variance(b, sigma, x0, a2)

    lo_dom = a1 + 0.02 * (a2 - a1)
    lo_t = a1 + 0.005 * (a2 - a1)
    hi_t = a2 + 0.05 * (a2 - a1)
    grid, vals = levinson.conditioned_drift_table(b, sigma, eps, lo_t, hi_t,
                                                  a1=a1)
    domain = geometry.DomainSpec.interval(lo_dom, a2)
    dt = cfg.dt_for(eps)
    batch = simulate_exit_batch_table1d(grid, vals, sigma, domain, x0, eps,
                                        dt, seed, cfg.paths)
    right = batch.crossed & (batch.face_ids == 1)
    stray = int(np.sum(~right))
    stat = (batch.tau[right] - T) / eps

    tests = []
    d, pv = ks_test(stat, _norm_cdf_scaled(var))
    tests.append(TestOutcome("conditioned-time-ks", "ks", d, pv,
                             pv >= cfg.levels["ks"],
                             f"eps^-1 (tau - T) vs N(0, {var:.4g})"))
    emp_var = float(np.var(stat))
    rel = abs(emp_var - var) / var
    var_tol = float(p.get("var_rel_tol", 0.10))
    tests.append(TestOutcome("conditioned-variance", "rel", rel, None,
                             rel <= var_tol,
                             f"empirical {emp_var:.4g} vs {var:.4g}"))
    tests.append(TestOutcome("stray-fraction", "info", stray / cfg.paths,
                             None, stray <= 0.01 * cfg.paths,
                             "paths absorbed away from a2"))
    return {"samples": {"time_rescaled": stat},
            "summary": {"T": T, "variance": var, "empirical_var": emp_var,
                        "mean": float(np.mean(stat)), "dt": dt,
                        "stray": stray},
            "tests": tests}


def _cell_two_node(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    p = cfg.params
    lp, lm = float(p.get("lp", 1.0)), float(p.get("lm", 2.0))
    mup, mum = float(p.get("mup", 1.0)), float(p.get("mum", 2.0))
    model = hetero.two_node_model(lp, lm, mup, mum,
                                  x0_height=float(p.get("x0_height", 0.25)))
    dt = float(p.get("dt", 1e-3))
    report = hetero.compose_poincare(model, eps, cfg.paths, seed, dt=dt,
                                     mode=p.get("mode", "hybrid"))
    tests = []
    sig = cfg.levels.get("binom_sigmas", 3.0)
    expected = dict(zip(("y1", "y2", "y3"), model.report.p))
    for label in ("y1", "y2", "y3"):
        freq = report.frequency(label)
        want = expected.get(label)
        if want is None:
            tests.append(TestOutcome(f"freq-{label}", "info", freq, None,
                                     None, "no closed-form weight; estimate"))
            continue
        want = float(want)
        band = sig * math.sqrt(want * (1 - want) / cfg.paths)
        tests.append(TestOutcome(
            f"freq-{label}", "band", freq, None, abs(freq - want) <= band,
            f"expected {want:.4f} +- {band:.4f}"))
    return {"samples": {label: pts for label, pts in
                        report.terminal_points.items()},
            "summary": {"frequencies": report.frequencies,
                        "stray": report.stray, "case": model.report.case_id,
                        "dt": dt},
            "tests": tests}


def _cell_quasipotential(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    p = cfg.params
    field = fields.gradient_double_well()
    phi = fields.double_well_potential
    domain = geometry.DomainSpec.interval(*p.get("domain", (-1.3, 1.2)))
    pairs = p.get("pairs", [(-0.9, -0.3), (-0.75, -0.25), (-0.6, -0.15),
                            (-0.5, -0.05), (-0.85, -0.45)])
    rel_tol = float(p.get("rel_tol", 0.01))
    tests = []
    values = []
    for i, (xa, xb) in enumerate(pairs):
        res = ldp.minimize_quasipotential(field, None, [xa], [xb], domain,
                                          n_points=int(p.get("n_points", 200)),
                                          restarts=int(p.get("restarts", 5)),
                                          seed=seed + i)
        oracle = 2.0 * (phi(xb) - phi(xa))
        rel = abs(res.V - oracle) / abs(oracle)
        values.append((res.V, oracle))
        tests.append(TestOutcome(f"pair-{i}", "rel", rel, None, rel <= rel_tol,
                                 f"V={res.V:.6g} oracle={oracle:.6g} T={res.T:.3g}"))
    x0 = float(p.get("x0", -1.0))
    rep = ldp.exit_location_minimizers(field, None, [x0], domain)
    V_left = 2.0 * (phi(domain.lo[0]) - phi(x0))
    V_right = 2.0 * ((phi(0.0) - phi(x0)) + max(phi(domain.hi[0]) - phi(1.0), 0.0))
    want = domain.lo[0] if V_left < V_right else domain.hi[0]
    got = float(rep.minimizers[0][0])
    tests.append(TestOutcome("exit-location", "info", got, None,
                             abs(got - want) < 1e-9,
                             f"minimizer {got:g}, lower barrier {want:g}"))
    return {"samples": {"V": np.array([v for v, _ in values]),
                        "oracle": np.array([o for _, o in values])},
            "summary": {"boundary_values": rep.values.tolist()},
            "tests": tests}


def _cell_simulate(cfg: ExperimentConfig, eps: float, seed: int) -> dict:
    field = fields.field_from_config(cfg.field)
    domain = domain_from_config(cfg.domain)
    p = cfg.params
    sigma = np.asarray(p.get("sigma", np.eye(field.dim).tolist()), dtype=float)
    x0 = np.asarray(p.get("x0", np.zeros(field.dim).tolist()), dtype=float)
    system = SdeSystem(field=field, sigma=sigma, initial=InitialLaw(x0=x0))
    dt = cfg.dt_for(eps)
    batch = simulate_exit_batch(system, domain, eps, dt, seed, cfg.paths,
                                horizon=float(p.get("horizon", 1e4)))
    tests = []
    degenerate = eps == 0.0 or np.allclose(sigma, 0.0)
    if degenerate:
        tests.append(TestOutcome("ks", "ks", 0.0, None, None,
                                 "degenerate: deterministic statistics"))
    return {"samples": {"tau": batch.tau,
                        **{f"exit_x{k}": batch.exit_points[:, k]
                           for k in range(field.dim)},
                        "face": batch.face_ids.astype(float)},
            "summary": {"mean_tau": float(batch.tau.mean()),
                        "crossed": int(batch.crossed.sum()), "dt": dt},
            "tests": tests}


SCENARIOS = {
    "linear-saddle-exit": _cell_linear_saddle,
    "day-density": _cell_day_density,
    "levinson-constant-drift": _cell_levinson,
    "condition1d": _cell_condition1d,
    "two-node": _cell_two_node,
    "quasipotential-double-well": _cell_quasipotential,
    "simulate": _cell_simulate,
}


# ----------------------------------------------------------------------
# Runner
# ----------------------------------------------------------------------

def _write_cell_csv(path: str, samples: dict) -> None:
    cols = {}
    for name, arr in samples.items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            cols[name] = arr
        else:
            for k in range(arr.shape[1]):
                cols[f"{name}{k}"] = arr[:, k]
    if not cols:
        return
    n = max(c.size for c in cols.values())
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            fh.write(",".join(repr(float(c[i])) if i < c.size else ""
                              for c in cols.values()) + "\n")


def run_experiment(config: ExperimentConfig) -> TestReport:
    """Run every ``(eps, paths)`` cell and aggregate a pass/fail report.

    A failed cell records its error and does not poison siblings; the
    report is emitted either way.
    """
    if config.scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {config.scenario!r}; "
                         f"have {sorted(SCENARIOS)}")
    runner = SCENARIOS[config.scenario]
    t0 = time.perf_counter()

    def run_cell(i_eps):
        i, eps = i_eps
        try:
            out = runner(config, eps, config.cell_seed(i))
            return i, eps, out, None
        except Exception as exc:  # fault isolation per cell
            return i, eps, None, f"{type(exc).__name__}: {exc}"

    jobs = list(enumerate(config.eps))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run_cell, jobs))
    else:
        results = [run_cell(j) for j in jobs]
    results.sort(key=lambda r: r[0])

    cells = []
    all_passed = True
    for i, eps, out, err in results:
        if err is not None:
            cells.append({"eps": eps, "error": err, "tests": [],
                          "summary": {}})
            all_passed = False
            continue
        tests = [t.to_dict() for t in out["tests"]]
        cell_passed = all(t["passed"] is not False for t in tests)
        all_passed = all_passed and cell_passed
        cells.append({"eps": eps, "error": None, "tests": tests,
                      "summary": out["summary"], "passed": cell_passed})
        if config.out:
            os.makedirs(config.out, exist_ok=True)
            _write_cell_csv(os.path.join(
                config.out, f"{config.scenario}_eps{i}.csv"), out["samples"])

    report = TestReport(scenario=config.scenario,
                        config={**asdict(config)},
                        cells=cells, passed=all_passed,
                        runtime_s=time.perf_counter() - t0,
                        code_version=_code_version())
    if config.out:
        os.makedirs(config.out, exist_ok=True)
        with open(os.path.join(config.out, "report.json"), "w") as fh:
            fh.write(report.to_json())
    return report
