"""Deterministic flow machinery.

Provides the flow ``S^t x`` of a vector field, the linearization
``Phi_x(t)`` along an orbit, first boundary-hitting times of the flow,
and the check that an orbit leaves a domain immediately and transversally
after first touching its boundary.

The integrator is a hand-rolled Cash-Karp embedded Runge-Kutta 4(5) pair
with PI step control.  Exit times are localized by bisection on the
bracketing step to 1e-10 in time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import DomainSpec, boundary_cross, contains, outward_normal

DEFAULT_HORIZON = 1e4
TANGENTIAL_TOL = 1e-8


class DivergedOrbitError(RuntimeError):
    """Step size underflowed; carries the last valid state."""

    def __init__(self, t: float, state: np.ndarray):
        super().__init__(f"orbit diverged near t={t:.6g}")
        self.t = t
        self.state = state


class NoExitError(RuntimeError):
    def __init__(self, horizon: float):
        super().__init__(f"flow did not reach the boundary within horizon {horizon:g}")
        self.horizon = horizon


@dataclass(frozen=True)
class VectorFieldSpec:
    """A drift field with optional analytic Jacobian.

    ``drift`` maps a point of shape ``(dim,)`` to a vector of the same
    shape; catalog fields also broadcast over leading axes.  When
    ``jacobian`` is absent, central differences with step
    ``1e-6 * (1 + |x|)`` stand in.
    """

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    lipschitz_bound: float | None = None
    name: str = ""
    poly_data: tuple | None = None  # (exponents, coeffs) when polynomial

    def drift_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.asarray(self.drift(x), dtype=float)
        if out.shape != x.shape:
            raise ValueError(
                f"drift returned shape {out.shape}, expected {x.shape}")
        return out

    def drift_many(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        try:
            out = np.asarray(self.drift(X), dtype=float)
            if out.shape == X.shape:
                return out
        except Exception:
            pass
        return np.stack([self.drift_at(row) for row in X])

    def jac_at(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.jacobian is not None:
            return np.asarray(self.jacobian(x), dtype=float)
        h = 1e-6 * (1.0 + np.linalg.norm(x))
        J = np.empty((self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = h
            J[:, k] = (self.drift_at(x + e) - self.drift_at(x - e)) / (2 * h)
        return J

    def jac_many(self, X: np.ndarray) -> np.ndarray:
        """Jacobians at the rows of ``X``, shape (N, dim, dim).

        Uses vectorized central differences of ``drift_many``; per-point
        steps scale with 1 + |x|.
        """
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        if self.jacobian is not None and getattr(self, "poly_data", None) is None:
            return np.stack([self.jac_at(row) for row in X])
        J = np.empty((n, d, d))
        h = 1e-6 * (1.0 + np.linalg.norm(X, axis=1))
        if self.poly_data is not None:
            E, C = self.poly_data
            for k in range(d):
                dE = E.copy()
                keep = dE[:, k] > 0
                dE[keep, k] -= 1
                mono = np.prod(X[:, None, :] ** dE[None, :, :], axis=2)
                mono *= E[:, k][None, :] * keep[None, :]
                J[:, :, k] = mono @ C
            return J
        for k in range(d):
            step = np.zeros((n, d))
            step[:, k] = h
            J[:, :, k] = (self.drift_many(X + step)
                          - self.drift_many(X - step)) / (2 * h[:, None])
        return J

    def validate_jacobian(self, points, rtol: float = 1e-5) -> None:
        """Check the analytic Jacobian against central differences."""
        if self.jacobian is None:
            return
        for x in points:
            x = np.atleast_1d(np.asarray(x, dtype=float))
            analytic = self.jac_at(x)
            fd = VectorFieldSpec(self.dim, self.drift).jac_at(x)
            scale = max(1.0, float(np.max(np.abs(fd))))
            if np.max(np.abs(analytic - fd)) > rtol * scale:
                raise ValueError(
                    f"jacobian mismatch at {x}: max diff "
                    f"{np.max(np.abs(analytic - fd)):.3g} (scale {scale:.3g})")


@dataclass(frozen=True)
class OrbitSegment:
    """An orbit sampled on a grid together with its linearization."""

    times: np.ndarray
    states: np.ndarray          # (n, d)
    linearizations: np.ndarray  # (n, d, d), identity at the first node

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("orbit grid must be strictly increasing")
        dets = np.linalg.det(self.linearizations)
        if np.any(dets <= 0):
            raise ValueError("fundamental matrix lost positive determinant")


# -- Cash-Karp 4(5) ---------------------------------------------------

_CK_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (3 / 10, -9 / 10, 6 / 5),
    (-11 / 54, 5 / 2, -70 / 27, 35 / 27),
    (1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096),
)
_CK_B5 = (37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771)
_CK_B4 = (2825 / 27648, 0.0, 18575 / 48384, 13525 / 55296, 277 / 14336, 1 / 4)
_MIN_STEP_FACTOR = 1e-14


def _rk_step(f, t, x, h):
    k = []
    for i in range(6):
        xi = x.copy()
        for j, a in enumerate(_CK_A[i]):
            xi += h * a * k[j]
        k.append(f(xi))
    x5 = x + h * sum(b * ki for b, ki in zip(_CK_B5, k))
    x4 = x + h * sum(b * ki for b, ki in zip(_CK_B4, k))
    return x5, float(np.max(np.abs(x5 - x4)))


def _integrate(f, x0: np.ndarray, t_end: float, tol: float,
               callback=None) -> np.ndarray:
    """Integrate ``x' = f(x)`` from 0 to ``t_end >= 0`` adaptively.

    ``callback(t0, x0, t1, x1)`` sees every accepted step and may return
    False to halt early.
    """
    x = np.array(x0, dtype=float)
    t = 0.0
    if t_end == 0.0:
        return x
    h = min(0.1, t_end) or t_end
    safety, min_h = 0.9, max(t_end * _MIN_STEP_FACTOR, 1e-300)
    while t < t_end:
        h = min(h, t_end - t)
        with np.errstate(over="ignore", invalid="ignore"):
            x_new, err = _rk_step(f, t, x, h)
        scale = tol * (1.0 + float(np.max(np.abs(x))))
        if not np.isfinite(err) or (err > scale and h > min_h):
            if not np.isfinite(err):
                h *= 0.1
            else:
                h = max(min_h, safety * h * (scale / err) ** 0.25)
            if h <= min_h * 1.01 and (not np.isfinite(err) or err > 100 * scale):
                raise DivergedOrbitError(t, x)
            continue
        if callback is not None and callback(t, x, t + h, x_new) is False:
            return x_new
        t += h
        x = x_new
        if err > 0:
            h = min(safety * h * (scale / err) ** 0.2, 10 * h)
        else:
            h *= 5.0
    return x


def flow_evolve(field: VectorFieldSpec, x, t: float, tol: float = 1e-10) -> np.ndarray:
    """Evaluate ``S^t x``; negative ``t`` integrates the reversed field."""
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if t == 0.0:
        return x.copy()
    if t > 0:
        return _integrate(field.drift_at, x, t, tol)
    return _integrate(lambda y: -field.drift_at(y), x, -t, tol)


def linearize_along_orbit(field: VectorFieldSpec, x, t_grid,
                          tol: float = 1e-10) -> OrbitSegment:
    """Solve the orbit and ``dPhi/dt = A(t) Phi`` jointly on ``t_grid``.

    ``t_grid`` must increase from 0; ``Phi(0)`` is the identity.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("grid must increase from 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = field.dim

    def rhs(z):
        pos, Phi = z[:d], z[d:].reshape(d, d)
        return np.concatenate([field.drift_at(pos),
                               (field.jac_at(pos) @ Phi).ravel()])

    states = np.empty((t_grid.size, d))
    lins = np.empty((t_grid.size, d, d))
    z = np.concatenate([x, np.eye(d).ravel()])
    states[0], lins[0] = x, np.eye(d)
    for i in range(1, t_grid.size):
        z = _integrate(rhs, z, t_grid[i] - t_grid[i - 1], tol)
        states[i], lins[i] = z[:d], z[d:].reshape(d, d)
    return OrbitSegment(times=t_grid, states=states, linearizations=lins)


def deterministic_exit_time(field: VectorFieldSpec, domain: DomainSpec, x,
                            tol: float = 1e-10,
                            horizon: float = DEFAULT_HORIZON):
    """First boundary-hitting time ``T(x)`` of the flow and the hit point.

    The crossing step is bisected to 1e-10 in time.  Raises
    :class:`NoExitError` if the orbit stays inside up to ``horizon``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not contains(domain, x):
        raise ValueError("x must be strictly inside the domain")

    bracket = {}

    def watch(t0, x0, t1, x1):
        if not contains(domain, x1, margin=0.0):
            bracket.update(t0=t0, x0=x0, t1=t1)
            return False
        return True

    _integrate(field.drift_at, x, horizon, tol=min(tol, 1e-10), callback=watch)
    if not bracket:
        raise NoExitError(horizon)

    t_lo, t_hi = bracket["t0"], bracket["t1"]
    x_lo = bracket["x0"]
    # bisection inside the bracketing step, re-integrating from its start
    while t_hi - t_lo > 1e-10:
        t_mid = 0.5 * (t_lo + t_hi)
        x_mid = _integrate(field.drift_at, x_lo, t_mid - bracket["t0"], tol=1e-12)
        if contains(domain, x_mid, margin=0.0):
            t_lo = t_mid
        else:
            t_hi = t_mid
    T = 0.5 * (t_lo + t_hi)
    z = _integrate(field.drift_at, x_lo, T - bracket["t0"], tol=1e-12)
    return T, z


@dataclass(frozen=True)
class LevinsonCheck:
    """Outcome of the leave-immediately-and-transversally check.

    ``status`` is ``"levinson"``, ``"no_exit"``, or ``"inconclusive"``
    (tangential crossing).  ``holds`` is True/False for the first two and
    None when inconclusive.  ``transversality`` is the inner product of
    the drift at the exit point with the outward normal.
    """

    status: str
    T: float | None
    exit_point: np.ndarray | None
    face_id: int | None
    transversality: float | None

    @property
    def holds(self) -> bool | None:
        if self.status == "inconclusive":
            return None
        return self.status == "levinson"


def check_levinson(field: VectorFieldSpec, domain: DomainSpec, x,
                   probe_dt: float = 1e-2,
                   horizon: float = DEFAULT_HORIZON) -> LevinsonCheck:
    """Check finite exit plus immediate transversal departure at ``x``."""
    try:
        T, z = deterministic_exit_time(field, domain, x, horizon=horizon)
    except NoExitError:
        return LevinsonCheck("no_exit", None, None, None, None)

    # recover the face from a short outward continuation of the orbit
    x_pre = flow_evolve(field, z, -min(probe_dt, T) * 0.5, tol=1e-12)
    x_post = flow_evolve(field, x_pre, min(probe_dt, T), tol=1e-12)
    try:
        crossing = boundary_cross(domain, x_pre, x_post)
        face_id, z_hit = crossing.face_id, crossing.point
    except ValueError:
        face_id, z_hit = 0, z
    n = outward_normal(domain, z_hit, face_id)
    trans = float(field.drift_at(z_hit) @ n)
    if abs(trans) < TANGENTIAL_TOL:
        return LevinsonCheck("inconclusive", T, z_hit, face_id, trans)

    outside = True
    for s in np.linspace(probe_dt / 8, probe_dt, 8):
        y = flow_evolve(field, z, s, tol=1e-12)
        if contains(domain, y, margin=0.0) or domain.signed_distance(y) <= 0:
            outside = False
            break
    status = "levinson" if (outside and trans > 0) else "no_exit"
    return LevinsonCheck(status, T, z_hit, face_id, trans)
