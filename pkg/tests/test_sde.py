import math

import numpy as np
import pytest
from scipy import stats

from exitlab import fields
from exitlab.dynamics import deterministic_exit_time
from exitlab.geometry import DomainSpec
from exitlab.sde import (InitialLaw, NumericalFailureError, SdeSystem,
                         simulate_exit, simulate_exit_batch,
                         simulate_linear_saddle_exact_batch)


def _bm_system(dim=1, x0=None):
    f = fields.constant_drift([0.0] * dim)
    return SdeSystem(field=f, sigma=np.eye(dim),
                     initial=InitialLaw(x0=x0 or [0.0] * dim))


def test_noiseless_reduction_matches_flow():
    f = fields.constant_drift_1d(1.0)
    system = SdeSystem(field=f, sigma=np.eye(1), initial=InitialLaw(x0=[0.0]))
    dom = DomainSpec.interval(-1, 1)
    dt = 1e-3
    rec = simulate_exit(system, dom, epsilon=0.0, dt=dt, seed=5)
    T, z = deterministic_exit_time(f, dom, [0.0])
    assert rec.crossed
    assert abs(rec.tau - T) < 5 * dt
    assert abs(rec.exit_point[0] - z[0]) < 5 * dt


def test_brownian_mean_exit_time():
    # E tau = (1 - x0^2)/eps^2, the classical interval exit solution
    eps = 0.5
    batch = simulate_exit_batch(_bm_system(), DomainSpec.interval(-1, 1),
                                eps, 1e-3, seed=21, n_paths=3000)
    want = 1.0 / eps ** 2
    se = batch.tau.std() / math.sqrt(len(batch))
    assert abs(batch.tau.mean() - want) < 5 * se + 0.15


def test_immediate_exit_outside_start():
    system = SdeSystem(field=fields.constant_drift_1d(0.0), sigma=np.eye(1),
                       initial=InitialLaw(x0=[2.0]))
    rec = simulate_exit(system, DomainSpec.interval(-1, 1), 0.1, 1e-3, seed=1)
    assert rec.tau == 0.0 and rec.crossed and rec.face_id == -1


def test_nan_failure_reports_step():
    # second Euler step overflows to inf while still inside the huge box
    f = fields.polynomial_field(np.array([[3]]), np.array([[1e154]]))
    system = SdeSystem(field=f, sigma=np.eye(1), initial=InitialLaw(x0=[0.5]))
    with pytest.raises(NumericalFailureError) as exc:
        simulate_exit(system, DomainSpec.interval(-1e300, 1e300), 1.0, 1.0,
                      seed=3, horizon=50.0)
    assert exc.value.step >= 1


def test_determinism_and_backend_equality():
    f = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    dom = DomainSpec.box([-0.25, -0.45], [0.25, 0.45])
    system = SdeSystem(field=f, sigma=np.eye(2),
                       initial=InitialLaw(x0=[0.0, 0.25]))
    kw = dict(epsilon=1e-2, dt=1e-3, seed=42, n_paths=200)
    a = simulate_exit_batch(system, dom, **kw)
    b = simulate_exit_batch(system, dom, **kw)
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.exit_points, b.exit_points)
    nb = simulate_exit_batch(system, dom, backend="numba", **kw)
    npb = simulate_exit_batch(system, dom, backend="numpy", **kw)
    assert np.array_equal(nb.tau, npb.tau)
    assert np.array_equal(nb.exit_points, npb.exit_points)
    assert np.array_equal(nb.face_ids, npb.face_ids)


def test_block_size_independence():
    # per-path streams make results independent of batching granularity
    kw = dict(lp=1.0, lm=1.0, epsilon=1e-2, x0=0.25, delta=0.5, dt=1e-3,
              seed=9, n_paths=64)
    a = simulate_linear_saddle_exact_batch(**kw, block_steps=128)
    b = simulate_linear_saddle_exact_batch(**kw, block_steps=2048)
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.extra["N_eps"], b.extra["N_eps"])


def test_exact_saddle_identity_pathwise():
    lp, eps, delta = 1.3, 1e-2, 0.5
    batch = simulate_linear_saddle_exact_batch(lp, 0.7, eps, 0.2, delta, 1e-3,
                                               seed=4, n_paths=300)
    ident = (-math.log(eps) + np.log(delta / np.abs(batch.extra["N_eps"]))) / lp
    assert np.max(np.abs(batch.tau - ident)) <= 1e-6 * np.maximum(
        1.0, np.abs(ident)).max()
    assert np.all(np.abs(np.abs(batch.exit_points[:, 0]) - delta) < 1e-12)


def test_exact_saddle_sign_symmetric():
    batch = simulate_linear_saddle_exact_batch(1.0, 1.0, 1e-2, 0.25, 0.5,
                                               1e-3, seed=6, n_paths=2000)
    k = int(np.sum(batch.exit_points[:, 0] > 0))
    p = stats.binomtest(k, 2000, 0.5).pvalue
    assert p > 1e-4


def test_exact_saddle_marginal_variance_of_N():
    # N(t) alone: Ito isometry gives var (1 - e^{-2 lp t})/(2 lp)
    lp, T = 0.8, 2.0
    batch = simulate_linear_saddle_exact_batch(lp, 1.0, 1e-3, 0.0, 1e6, 1e-3,
                                               seed=8, n_paths=4000, horizon=T)
    assert not batch.crossed.any()
    want = (1.0 - math.exp(-2 * lp * T)) / (2 * lp)
    got = float(np.var(batch.extra["N_eps"]))
    assert abs(got - want) / want < 0.1


def test_exact_saddle_N_limit_variance():
    # N_eps converges to the full integral, variance 1/(2 lp)
    lp = 1.0
    batch = simulate_linear_saddle_exact_batch(lp, 1.0, 1e-4, 0.25, 0.5, 1e-3,
                                               seed=10, n_paths=4000)
    got = float(np.var(batch.extra["N_eps"]))
    want = 1.0 / (2 * lp)
    assert abs(got - want) / want < 0.1


def test_early_exit_probability_bound():
    # early exits are exponentially unlikely: P{tau <= T} <= C eps^2 e^{2 lp T}
    lp, delta, T = 1.0, 0.5, 3.0
    probs = {}
    for eps in (0.02, 0.01):
        batch = simulate_linear_saddle_exact_batch(lp, 1.0, eps, 0.25, delta,
                                                   1e-3, seed=12, n_paths=20000)
        probs[eps] = float(np.mean(batch.tau <= T))
    c_fit = probs[0.02] / (0.02 ** 2 * math.exp(2 * lp * T))
    assert probs[0.01] <= 3.0 * c_fit * 0.01 ** 2 * math.exp(2 * lp * T) + 5e-4
    assert probs[0.01] < probs[0.02]


def test_strong_order_multiplicative_vs_additive():
    """Euler strong error against a refined reference path: halving dt
    gains only sqrt(2) for multiplicative noise but a full factor 2 for
    additive noise (where Euler is first order)."""
    gen = np.random.default_rng(17)
    n, T = 4000, 1.0
    n_fine = 1024
    dW = gen.standard_normal((n, n_fine)) * math.sqrt(T / n_fine)

    def euler(mult, steps):
        agg = dW.reshape(n, steps, n_fine // steps).sum(axis=2)
        dt = T / steps
        x = np.ones(n)
        for k in range(steps):
            if mult:  # dX = -0.2 X dt + X dW: noise error dominates
                x = x - 0.2 * x * dt + x * agg[:, k]
            else:     # dX = -X dt + 0.3 dW: drift error dominates
                x = x - x * dt + 0.3 * agg[:, k]
        return x

    for mult, lo, hi in ((True, 1.25, 1.65), (False, 1.7, 2.4)):
        ref = euler(mult, 1024)
        e1 = math.sqrt(np.mean((euler(mult, 32) - ref) ** 2))
        e2 = math.sqrt(np.mean((euler(mult, 64) - ref) ** 2))
        ratio = e1 / e2
        assert lo < ratio < hi, (mult, ratio)


def test_sup_deviation_probability_linear_in_inv_eps2():
    # log P{sup_t |X - orbit| > delta} decreases about linearly in eps^-2
    eps_list = [0.3, 0.2, 0.15]
    delta = 0.2
    T, dt, n = 1.0, 2e-3, 30000
    steps = int(T / dt)
    logp = []
    for eps in eps_list:
        gen = np.random.default_rng(99)
        x = np.ones(n)
        orbit = 1.0
        hit = np.zeros(n, dtype=bool)
        for _ in range(steps):
            z = gen.standard_normal(n)
            x = x - x * dt + eps * math.sqrt(dt) * z
            orbit = orbit - orbit * dt
            hit |= np.abs(x - orbit) > delta
        p = max(float(np.mean(hit)), 1.0 / n)
        logp.append(math.log(p))
    inv = [1.0 / e ** 2 for e in eps_list]
    slope1 = (logp[1] - logp[0]) / (inv[1] - inv[0])
    slope2 = (logp[2] - logp[1]) / (inv[2] - inv[1])
    assert slope1 < 0 and slope2 < 0
    assert 0.2 < slope2 / slope1 < 5.0  # roughly linear decay


def test_initial_law_and_ellipticity_checks():
    law = InitialLaw(x0=[0.0], alpha2=0.5,
                     xi_sampler=lambda g: g.standard_normal(1))
    assert law.check_moments() < 10.0
    bad = InitialLaw(x0=[0.0], xi_sampler=lambda g: np.array([1e9]))
    with pytest.raises(ValueError):
        bad.check_moments(bound=1e6)
    system = SdeSystem(field=fields.constant_drift_1d(0.0),
                       sigma=np.zeros((1, 1)), initial=law)
    with pytest.raises(ValueError):
        system.check_ellipticity([np.zeros(1)])


def test_exit_record_seed_and_csv(tmp_path):
    from exitlab.rng import path_key

    batch = simulate_linear_saddle_exact_batch(1.0, 1.0, 1e-2, 0.25, 0.5,
                                               1e-3, seed=3, n_paths=120)
    rec = batch.record(5)
    assert rec.seed == path_key(3, 5)
    out = tmp_path / "records.csv"
    batch.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "tau,exit_x0,exit_x1,face,seed"
    assert len(lines) == 121


def test_transformed_saddle_identity_conjugation_matches_exact():
    """In normal-form coordinates of an already-linear saddle the Euler
    run must reproduce the exact OU exit statistics."""
    from exitlab import fields as flds
    from exitlab.normalform import normal_form_transform
    from exitlab.sde import simulate_transformed_saddle_batch

    nf = normal_form_transform(flds.linear_saddle(1.0, 1.0), R=3, ratio=(1, 1))
    init = InitialLaw(x0=[0.0, 0.25])
    tb = simulate_transformed_saddle_batch(nf, np.eye(2), init, 0.05, 5e-4,
                                           seed=31, n_paths=1500, delta=0.5)
    lb = simulate_linear_saddle_exact_batch(1.0, 1.0, 0.05, 0.25, 0.5, 5e-4,
                                            seed=32, n_paths=1500)
    assert stats.ks_2samp(tb.tau, lb.tau).pvalue > 1e-3
    assert stats.ks_2samp(tb.exit_points[:, 1],
                          lb.exit_points[:, 1]).pvalue > 1e-3
    k = int(np.sum(tb.exit_points[:, 0] > 0))
    assert stats.binomtest(k, 1500, 0.5).pvalue > 1e-4


def test_transformed_saddle_residual_drift_bound_samplewise():
    """|drift residual| <= K1 y1^2 |y2| + K2 eps^2 along simulated paths."""
    from exitlab import fields as flds
    from exitlab.normalform import normal_form_transform
    from exitlab.sde import simulate_transformed_saddle_batch

    E = np.array([[1, 0], [0, 1], [2, 1], [1, 2]])
    C = np.array([[1.0, 0.0], [0.0, -1.0], [0.5, 0.0], [0.0, -0.4]])
    nf = normal_form_transform(flds.polynomial_field(E, C), R=3, ratio=(1, 1))
    eps = 0.05
    init = InitialLaw(x0=[0.0, min(0.3, nf.delta * 0.6)])
    batch = simulate_transformed_saddle_batch(nf, np.eye(2), init, eps, 1e-3,
                                              seed=40, n_paths=60)
    K1 = sum(abs(c) * nf.delta_prime ** (a.order - 3)
             for p in nf.resonant_parts
             for (a, j), c in p.coefficients.items() if j == 1)
    pts = batch.exit_points
    vals = nf.resonant_poly(pts)
    bound = K1 * pts[:, 0] ** 2 * np.abs(pts[:, 1]) + 1e-12
    assert np.all(np.abs(vals[:, 0]) <= bound)


def test_bridge_flag_reduces_exit_time_bias():
    # coarse-step Brownian exit: ignoring intra-step crossings biases tau
    # upward; the bridge correction must pull the mean back down
    eps, dt = 0.5, 0.02
    plain = simulate_exit_batch(_bm_system(), DomainSpec.interval(-1, 1),
                                eps, dt, seed=77, n_paths=4000)
    bridged = simulate_exit_batch(_bm_system(), DomainSpec.interval(-1, 1),
                                  eps, dt, seed=77, n_paths=4000, bridge=True,
                                  backend="numpy")
    assert bridged.tau.mean() < plain.tau.mean()
    # and it lands nearer the exact mean exit time 1/eps^2
    want = 1.0 / eps ** 2
    assert abs(bridged.tau.mean() - want) < abs(plain.tau.mean() - want)


def test_xi_initial_condition_enters_at_alpha2_scale():
    xi = lambda g: np.array([1.0])  # deterministic unit bump
    law = InitialLaw(x0=[0.0], alpha2=0.5, xi_sampler=xi)
    system = SdeSystem(field=fields.constant_drift_1d(1.0), sigma=np.eye(1),
                       initial=law)
    rec = simulate_exit(system, DomainSpec.interval(-1, 1), epsilon=0.04,
                        dt=1e-4, seed=2)
    # start at eps^0.5 = 0.2, unit drift: tau ~ 0.8
    assert abs(rec.tau - 0.8) < 0.05
