import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from exitlab.harness import binomial_sign_test, ks_test
from exitlab.saddle import (ImproperLawError, SaddleSpec, beta_exponent,
                            classify_symmetry, day_cdf, day_density,
                            eta_plus_law, exit_time_shift_law, full_exit_law,
                            linear_h_constants, nplus_variance, sigma_pm,
                            theta_law)


def _spec(**kw):
    base = dict(lp=1.0, lm=1.0, delta=0.5, alpha=1.0, y2=0.25)
    base.update(kw)
    return SaddleSpec(**base)


def test_beta_exponent_values():
    assert beta_exponent(1.0, 1.0, 2.0) == 1.0
    assert beta_exponent(1.0, 2.0, 1.0) == 0.5
    assert beta_exponent(0.5, 1.0, 2.0) == 1.0  # boundary case hits 1


def test_beta_exponent_region_and_continuity():
    for alpha in np.linspace(0.2, 1.0, 9):
        for lp in (0.5, 1.0, 2.0):
            for lm in (0.5, 1.0, 2.0):
                b = beta_exponent(alpha, lp, lm)
                if alpha * lm >= lp:
                    assert b == 1.0
                else:
                    assert abs(b - alpha * lm / lp) < 1e-15
                # continuity across the boundary
                eps = 1e-9
                assert abs(beta_exponent(alpha, lp, lm)
                           - beta_exponent(alpha, lp * (1 + eps), lm)) < 1e-6


def test_classify_symmetry_trichotomy():
    assert classify_symmetry(1.0, 1.0, 2.0) == "symmetric"
    assert classify_symmetry(1.0, 1.0, 1.0) == "asymmetric"
    assert classify_symmetry(1.0, 2.0, 1.0) == "strongly_asymmetric"


def test_variance_quadratures_closed_form():
    spec = _spec(lp=1.3, lm=0.8)
    assert abs(nplus_variance(spec) - 1.0 / (2 * 1.3)) < 1e-8
    assert abs(sigma_pm(spec, +1) - 1.0 / (2 * 0.8)) < 1e-8
    assert abs(sigma_pm(spec, -1) - 1.0 / (2 * 0.8)) < 1e-8


def test_nplus_rate_override():
    spec = _spec(lp=1.0, lm=2.0, kappa=2.0)
    assert abs(nplus_variance(spec) - 0.25) < 1e-8


def test_nplus_state_dependent_row_quadrature():
    # sigma1 row (1 + y2^2, 0): m(s) = (1 + e^{-2 lm s} y2^2)^2
    spec = _spec(lp=1.0, lm=1.0, y2=0.5,
                 sigma1=lambda y: np.array([1.0 + y[1] ** 2, 0.0]))
    want, _ = integrate.quad(
        lambda s: math.exp(-2 * s) * (1 + math.exp(-2 * s) * 0.25) ** 2, 0, 60)
    assert abs(nplus_variance(spec) - want) < 1e-8


def test_eta_plus_alpha_one_gaussian():
    law = eta_plus_law(_spec())
    assert law.kind == "transformed-gaussian"
    assert abs(law.params["var"] - 0.5) < 1e-8
    law.self_check(n=100_000, level=1e-3)


def test_eta_plus_alpha_below_one_is_chi_only():
    spec = _spec(alpha=0.5, chi=("point", (0.7, 0.0)))
    law = eta_plus_law(spec)
    s = law.sample(1, 100)
    assert np.all(s == 0.7)


def test_spec_rejects_chi_atom_at_zero_for_partial_alpha():
    with pytest.raises(ValueError):
        _spec(alpha=0.5)  # default chi is a point mass at 0


def test_theta_symmetric_branch_gaussian():
    spec = _spec(lp=1.0, lm=2.0)
    law = theta_law(spec)
    assert law.params["branch"] == "symmetric"
    s = law.sample(2, 100_000)
    assert abs(np.var(s) - 1.0 / (2 * 2.0)) < 0.01
    law.self_check(n=100_000, level=1e-3)


def test_theta_strongly_asymmetric_point_mass_when_flat():
    spec = _spec(lp=2.0, lm=1.0, y2=0.0, chi=("point", (0.3, 0.0)))
    law = theta_law(spec)
    s = law.sample(3, 1000)
    assert np.all(s == 0.0)
    assert law.cdf(-1e-12) == 0.0 and law.cdf(1e-12) == 1.0


def test_theta_strongly_asymmetric_cdf_matches_sampler():
    law = theta_law(_spec(lp=2.0, lm=1.0))
    law.self_check(n=100_000, level=1e-3)


def test_theta_equal_rates_is_convolution_of_other_branches():
    # branch 2 law = branch 3 law (bias alone) + branch 1 law (Gaussian)
    spec_eq = _spec(lp=1.0, lm=1.0)
    law_eq = theta_law(spec_eq)
    gen = np.random.default_rng(77)
    eta = eta_plus_law(spec_eq)
    e = eta.sample(gen, 100_000)
    bias = (np.abs(e) / spec_eq.delta) ** 1.0 * spec_eq.y2
    gauss = math.sqrt(sigma_pm(spec_eq, +1)) * gen.standard_normal(100_000)
    direct = law_eq.sample(5, 100_000)
    stat, p = stats.ks_2samp(direct, bias + gauss)
    assert p > 1e-2
    law_eq.self_check(n=100_000, level=1e-3)


def test_exit_time_shift_median_oracle():
    # lp = 1, delta = 1: median = log(1/median|N|) with N ~ N(0, 1/2)
    spec = _spec(lp=1.0, lm=1.0, delta=1.0)
    law = exit_time_shift_law(spec)
    median_absN = math.sqrt(0.5) * stats.norm.ppf(0.75)
    want = math.log(1.0 / median_absN)
    assert abs(float(law.cdf(want)) - 0.5) < 1e-9
    s = law.sample(9, 1_000_000)
    assert abs(np.median(s) - want) < 5e-3
    law.self_check(n=100_000, level=1e-3)


def test_exit_time_shift_delta_translation():
    spec1 = _spec(delta=0.5)
    spec2 = _spec(delta=1.0)
    s1 = exit_time_shift_law(spec1).sample(4, 5000)
    s2 = exit_time_shift_law(spec2).sample(4, 5000)  # coupled by seed
    assert np.allclose(s2 - s1, math.log(2.0), atol=1e-12)


def test_exit_time_shift_point_mass_at_delta():
    spec = _spec(chi=("point", (0.5, 0.0)), sigma1=0.0)
    law = exit_time_shift_law(spec)
    assert np.all(law.sample(0, 50) == 0.0)


def test_exit_time_shift_improper_on_zero_atom():
    spec = _spec(sigma1=0.0)  # eta+ becomes a point mass at 0
    with pytest.raises(ImproperLawError):
        exit_time_shift_law(spec)


def test_full_exit_sign_marginal_bernoulli_half():
    law = full_exit_law(_spec())
    out = law.sample(11, 20_000)
    k = int(np.sum(out["sign"] > 0))
    assert binomial_sign_test(k, 20_000, 0.5) > 1e-3


def test_full_exit_identity_gradient_spatial_is_theta():
    law = full_exit_law(_spec())
    out = law.sample(3, 500)
    assert np.allclose(out["spatial"][:, 0], 0.0)
    assert np.allclose(out["spatial"][:, 1], out["theta"])


def test_full_exit_strongly_asymmetric_sign_of_bias():
    spec = _spec(lp=2.0, lm=1.0, y2=0.25)
    out = full_exit_law(spec).sample(8, 4000)
    assert np.all(out["theta"] > 0)  # a.s. the sign of y2, no Gaussian term


def test_full_exit_grad_g_applied_at_signed_base():
    G = np.array([[1.0, 0.5], [0.0, 2.0]])
    law = full_exit_law(_spec(), grad_g=lambda base: G)
    out = law.sample(5, 400)
    assert np.allclose(out["spatial"], np.outer(out["theta"], G[:, 1]))


def test_scaling_delta_shifts_time_and_bias_factor():
    c = 2.0
    spec1 = _spec(lp=2.0, lm=1.0, delta=0.5)
    spec2 = _spec(lp=2.0, lm=1.0, delta=0.5 * c)
    t1 = exit_time_shift_law(spec1).sample(6, 4000)
    t2 = exit_time_shift_law(spec2).sample(6, 4000)
    assert np.allclose(t2 - t1, math.log(c) / 2.0, atol=1e-12)
    th1 = theta_law(spec1).sample(7, 4000)
    th2 = theta_law(spec2).sample(7, 4000)
    assert np.allclose(th2, th1 * c ** (-0.5), atol=1e-12)


def test_day_density_normalization_and_shape():
    val, _ = integrate.quad(day_density, -8, 30, limit=200)
    assert abs(val - 1.0) < 1e-6
    # maximizer at x = log(2)/2 where the exponent derivative vanishes
    opt = optimize.minimize_scalar(lambda x: -day_density(x),
                                   bounds=(-2, 2), method="bounded")
    assert abs(opt.x - 0.5 * math.log(2.0)) < 1e-5
    # right tail behaves like (2/sqrt(pi)) e^{-x}
    x = 12.0
    assert abs(day_density(x) / (2 / math.sqrt(math.pi) * math.exp(-x)) - 1.0) < 1e-4


def test_day_cdf_matches_density_quadrature():
    for x in (-1.0, 0.0, 0.7, 2.5):
        q, _ = integrate.quad(day_density, -10, x, limit=200)
        assert abs(q - float(day_cdf(x))) < 1e-7


def test_day_law_is_equal_rates_time_shift_with_unit_box():
    # the closed-form density is the delta = 1 exit-time shift at lp = lm
    spec = _spec(lp=1.0, lm=1.0, delta=1.0)
    s = exit_time_shift_law(spec).sample(13, 200_000)
    stat, p = ks_test(s, day_cdf)
    assert p > 1e-3


def test_limit_law_serialization(tmp_path):
    import json

    law = eta_plus_law(_spec())
    data = json.loads(law.to_json())
    assert data["kind"] == "transformed-gaussian"
    assert data["params"]["var"] == pytest.approx(0.5, abs=1e-8)
    assert data["has_cdf"]
    out = tmp_path / "samples.csv"
    s = law.samples_to_csv(out, seed=1, n=64)
    lines = out.read_text().splitlines()
    assert lines[0] == "sample" and len(lines) == 65
    assert float(lines[1]) == s[0]


def test_linear_h_constants_vanish_for_unit_box():
    h1, h2 = linear_h_constants(1.0, 1.0)
    assert h1 == 0.0 and h2 == 0.0
    h1, _ = linear_h_constants(2.0, math.e)
    assert abs(h1 - 0.5) < 1e-15
