import numpy as np
import pytest
from scipy.linalg import expm

from exitlab import fields
from exitlab.dynamics import (DivergedOrbitError, NoExitError, VectorFieldSpec,
                              check_levinson, deterministic_exit_time,
                              flow_evolve, linearize_along_orbit)
from exitlab.geometry import DomainSpec


def test_flow_linear_diagonal():
    f = fields.linear_saddle(1.0, 1.0)
    out = flow_evolve(f, [0.0, 1.0], np.log(2.0))
    assert np.allclose(out, [0.0, 0.5], atol=1e-10)


def test_flow_zero_field_identity():
    f = fields.constant_drift([0.0, 0.0])
    x = np.array([0.3, -0.7])
    assert np.allclose(flow_evolve(f, x, 5.0), x, atol=1e-12)


def test_flow_rotation_closed_form():
    # planar rotation: the orbit of (1, 0) reaches (0, -1) at t = pi/2
    f = fields.linear_field(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    out = flow_evolve(f, [1.0, 0.0], np.pi / 2, tol=1e-12)
    assert np.allclose(out, [0.0, -1.0], atol=1e-8)


def test_flow_tolerance_refinement():
    f = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    x = [0.1, 0.2]
    coarse = flow_evolve(f, x, 2.0, tol=1e-6)
    fine = flow_evolve(f, x, 2.0, tol=1e-7)
    assert np.max(np.abs(coarse - fine)) < 10 * 1e-6


def test_flow_semigroup_property():
    f = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    gen = np.random.default_rng(7)
    for _ in range(5):
        x = gen.uniform(-0.3, 0.3, size=2)
        s, t = gen.uniform(0.1, 1.0, size=2)
        direct = flow_evolve(f, x, s + t, tol=1e-10)
        composed = flow_evolve(f, flow_evolve(f, x, s, tol=1e-10), t, tol=1e-10)
        assert np.max(np.abs(direct - composed)) < 1e-6


def test_flow_reversibility():
    f = fields.gradient_double_well()
    x = np.array([0.4])
    back = flow_evolve(f, flow_evolve(f, x, 1.5, tol=1e-11), -1.5, tol=1e-11)
    assert np.max(np.abs(back - x)) < 1e-8


def test_diverged_orbit_reports_state():
    f = fields.polynomial_field(np.array([[2]]), np.array([[1.0]]))  # x' = x^2
    with pytest.raises(DivergedOrbitError) as exc:
        flow_evolve(f, [1.0], 2.0)
    assert np.isfinite(exc.value.state).all()
    assert exc.value.t < 2.0


def test_linearize_constant_matrix_is_expm():
    A = np.array([[0.3, 1.1], [-0.6, -0.2]])
    f = fields.linear_field(A)
    seg = linearize_along_orbit(f, [0.2, -0.1], np.linspace(0, 1.5, 6), tol=1e-12)
    assert np.allclose(seg.linearizations[-1], expm(1.5 * A), atol=1e-8)
    assert np.allclose(seg.linearizations[0], np.eye(2))


def test_linearize_1d_reversed_drift_closed_form():
    # flow of -b with b(y) = -(1 + y): Phi(t) = b(S^t x)/b(x) = e^t
    f = fields.polynomial_field(np.array([[0], [1]]), np.array([[1.0], [1.0]]))
    grid = np.linspace(0, 0.6, 13)
    seg = linearize_along_orbit(f, [0.0], grid, tol=1e-12)
    b = lambda y: -(1.0 + y)
    expected = b(seg.states[:, 0]) / b(0.0)
    assert np.allclose(seg.linearizations[:, 0, 0], expected, atol=1e-9)
    assert np.allclose(seg.linearizations[:, 0, 0], np.exp(grid), atol=1e-9)


def test_linearize_cocycle():
    f = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    x = np.array([0.05, 0.2])
    s, t = 0.4, 0.7
    seg_s = linearize_along_orbit(f, x, np.array([0.0, s]), tol=1e-11)
    seg_st = linearize_along_orbit(f, x, np.array([0.0, s + t]), tol=1e-11)
    seg_t = linearize_along_orbit(f, seg_s.states[-1], np.array([0.0, t]),
                                  tol=1e-11)
    prod = seg_t.linearizations[-1] @ seg_s.linearizations[-1]
    assert np.max(np.abs(prod - seg_st.linearizations[-1])) < 1e-6


def test_linearize_matches_flow_differences():
    f = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    x = np.array([0.1, 0.15])
    t = 0.8
    seg = linearize_along_orbit(f, x, np.array([0.0, t]), tol=1e-11)
    gen = np.random.default_rng(3)
    h = 1e-5
    for _ in range(3):
        v = gen.standard_normal(2)
        fd = (flow_evolve(f, x + h * v, t, tol=1e-12)
              - flow_evolve(f, x, t, tol=1e-12)) / h
        lin = seg.linearizations[-1] @ v
        assert np.max(np.abs(fd - lin)) < 1e-3 * max(1.0, np.max(np.abs(lin)))


def test_exit_time_unit_speed():
    f = fields.constant_drift_1d(1.0)
    T, z = deterministic_exit_time(f, DomainSpec.interval(-1, 1), [0.0])
    assert abs(T - 1.0) < 1e-9
    assert abs(z[0] - 1.0) < 1e-9


def test_exit_time_integral_oracle_1d():
    # flow of -b with b(y) = -(1 + y): T(x0) = -int_{x0}^{a2} dy/b(y)
    from scipy.integrate import quad

    f = fields.polynomial_field(np.array([[0], [1]]), np.array([[1.0], [1.0]]))
    a2 = 1.0
    T, z = deterministic_exit_time(f, DomainSpec.interval(-0.9, a2), [0.0])
    oracle, _ = quad(lambda y: -1.0 / (-(1.0 + y)), 0.0, a2)
    assert abs(T - oracle) < 1e-8
    assert abs(z[0] - a2) < 1e-9


def test_exit_time_planar_saddle():
    f = fields.linear_saddle(1.0, 1.0)
    T, z = deterministic_exit_time(f, DomainSpec.square(1.0), [0.5, 0.0])
    assert abs(T - np.log(2.0)) < 1e-9
    assert np.allclose(z, [1.0, 0.0], atol=1e-8)


def test_exit_time_no_exit():
    f = fields.linear_field(np.array([[-1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(NoExitError):
        deterministic_exit_time(f, DomainSpec.square(1.0), [0.5, 0.0],
                                horizon=50.0)


def test_levinson_transversal_true():
    f = fields.constant_drift([1.0, 0.0])
    c = check_levinson(f, DomainSpec.square(1.0), [0.0, 0.0], probe_dt=1e-2)
    assert c.status == "levinson" and c.holds is True
    assert abs(c.transversality - 1.0) < 1e-8
    assert abs(c.T - 1.0) < 1e-8


def test_levinson_stable_manifold_false():
    f = fields.linear_saddle(1.0, 1.0)
    c = check_levinson(f, DomainSpec.square(1.0), [0.0, 0.5], probe_dt=1e-2,
                       horizon=80.0)
    assert c.status == "no_exit" and c.holds is False


def test_levinson_tangential_inconclusive():
    # drift nearly parallel to the face it crosses
    f = fields.constant_drift([1e-9, 1.0])
    dom = DomainSpec.box([-1, -3], [1, 1])
    c = check_levinson(f, dom, [1.0 - 1e-9, -2.0], probe_dt=1e-2)
    assert c.status == "inconclusive" and c.holds is None
    assert abs(c.transversality) < 1e-8


def test_field_spec_validation():
    bad = VectorFieldSpec(dim=2, drift=lambda x: np.zeros(3))
    with pytest.raises(ValueError):
        bad.drift_at([0.0, 0.0])
    wrong_jac = VectorFieldSpec(dim=1, drift=lambda x: -x,
                                jacobian=lambda x: np.array([[5.0]]))
    with pytest.raises(ValueError):
        wrong_jac.validate_jacobian([np.array([0.3])])
    f = fields.two_node_field(1.0, 2.0, 1.0, 2.0)
    f.validate_jacobian(np.random.default_rng(1).uniform(-1, 1, size=(5, 2)))


def test_jac_many_matches_pointwise():
    f = fields.two_node_field(1.0, 2.0, 1.5, 2.5)
    pts = np.random.default_rng(2).uniform(-0.5, 0.5, size=(7, 2))
    J = f.jac_many(pts)
    for i, p in enumerate(pts):
        assert np.allclose(J[i], f.jac_at(p), atol=1e-9)


def test_orbit_segment_determinant_positive():
    f = fields.linear_saddle(2.0, 1.0)
    seg = linearize_along_orbit(f, [0.01, 0.3], np.linspace(0, 2, 9))
    assert np.all(np.linalg.det(seg.linearizations) > 0)
