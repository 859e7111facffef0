"""Exit corrections when the flow leaves the domain in finite time.

Implements the first-order correction machinery: sampling of the
limiting fluctuation

    phi0(T) = 1{a2=a} Phi(T) xi0
            + 1{a1=a} Phi(T) int_0^T Phi(s)^{-1} Psi0(S^s x0) ds
            + 1{1=a}  Phi(T) int_0^T Phi(s)^{-1} sigma(S^s x0) dW(s),

with ``a = a1 ^ a2 ^ 1``, the oblique projections ``pi_b`` / ``pi_M``
at the deterministic exit point, the law of the rescaled correction
``(-pi_b phi0(T), pi_M phi0(T))``, straight-motion rectification
residuals, and the 1-d conditioned-diffusion drift

    b_eps(x) = b(x) + eps^2 sigma^2(x) h_eps(x) / int_{a1}^x h_eps,
    h_eps(x) = exp(-(2/eps^2) int_{a1}^x b/sigma^2),

evaluated in log space (h_eps overflows like exp(c/eps^2)), together
with the limiting conditioned exit-time variance
``-int_{x0}^{a2} sigma^2/b^3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .dynamics import VectorFieldSpec, check_levinson, linearize_along_orbit
from .geometry import DomainSpec, outward_normal
from .rng import single_generator

TRANSVERSALITY_TOL = 1e-8
CONDITION_LIMIT = 1e12


class TransversalityError(ValueError):
    """Drift at the base point is (numerically) tangent to the surface."""


class ConditioningError(RuntimeError):
    """The fundamental matrix became too ill-conditioned to invert."""


class SingularIntegrandError(ValueError):
    """The drift touches zero inside the integration range."""


class LevinsonPreconditionError(RuntimeError):
    """The deterministic orbit fails the immediate-transversal-exit check."""


# ----------------------------------------------------------------------
# Hypersurface patches and oblique projections
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class HypersurfacePatch:
    """Local graph description of a hypersurface at a base point.

    ``tangent`` rows are an orthonormal basis of the tangent space,
    orthogonal to the unit ``normal``.  ``graph`` maps tangent
    coordinates to the graph height along the drift direction (zero for
    flat faces) with ``graph(0) = 0`` and vanishing gradient.
    """

    z: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    graph: Callable | None = None

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        t = np.atleast_2d(np.asarray(self.tangent, dtype=float))
        if abs(np.linalg.norm(n) - 1.0) > 1e-10:
            raise ValueError("normal must be unit length")
        if t.shape[0] == 0:  # 1-d: the tangent space is trivial
            return
        gram = t @ t.T
        if np.max(np.abs(gram - np.eye(t.shape[0]))) > 1e-10:
            raise ValueError("tangent basis must be orthonormal")
        if np.max(np.abs(t @ n)) > 1e-10:
            raise ValueError("tangent basis must be orthogonal to the normal")

    def graph_height(self, y):
        if self.graph is None:
            return 0.0
        return float(self.graph(np.asarray(y, dtype=float)))

    def curvature_bound(self, radius: float, n: int = 64) -> float:
        """Fitted constant C with |graph(y)| <= C |y|^2 on the patch."""
        if self.graph is None:
            return 0.0
        dim_t = self.tangent.shape[0]
        gen = single_generator(11)
        best = 0.0
        for _ in range(n):
            y = gen.standard_normal(dim_t)
            y *= radius * gen.random() ** (1.0 / dim_t) / np.linalg.norm(y)
            r2 = float(y @ y)
            if r2 > 0:
                best = max(best, abs(self.graph_height(y)) / r2)
        return best


def flat_patch(z, normal) -> HypersurfacePatch:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n = np.atleast_1d(np.asarray(normal, dtype=float))
    n = n / np.linalg.norm(n)
    d = z.size
    # complete the normal to an orthonormal frame
    basis = np.linalg.qr(np.column_stack([n, np.eye(d)]))[0]
    tangent = basis[:, 1:d].T
    return HypersurfacePatch(z=z, normal=n, tangent=tangent)


def patch_from_domain(domain: DomainSpec, point, face_id: int = 0) -> HypersurfacePatch:
    """Patch of the domain boundary at ``point``; curved kinds get a
    graph function solved from the boundary equation along the normal."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    n = outward_normal(domain, point, face_id)
    patch = flat_patch(point, n)
    if domain.kind in ("box", "polygon"):
        return patch

    def graph(y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        base = point + y @ patch.tangent

        def fval(t):
            return domain.signed_distance(base + t * n)

        return optimize.brentq(fval, -0.5 * domain_scale, 0.5 * domain_scale,
                               xtol=1e-12)

    domain_scale = domain.radius if domain.kind == "ball" else 1.0
    return HypersurfacePatch(z=point, normal=n, tangent=patch.tangent, graph=graph)


@dataclass(frozen=True)
class ProjectionPair:
    """Oblique decomposition ``v = pi_b(v) b(z) + pi_M(v)``."""

    bz: np.ndarray
    tangent: np.ndarray
    _inv: np.ndarray

    def pi_b(self, v) -> float:
        return float((self._inv @ np.asarray(v, dtype=float))[0])

    def pi_M(self, v) -> np.ndarray:
        c = self._inv @ np.asarray(v, dtype=float)
        return c[1:] @ self.tangent

    def pi_M_coords(self, v) -> np.ndarray:
        return (self._inv @ np.asarray(v, dtype=float))[1:]

    def decompose_many(self, V: np.ndarray):
        """(pi_b, tangent coordinates) for rows of V."""
        C = V @ self._inv.T
        return C[:, 0], C[:, 1:]


def make_projections(bz, patch: HypersurfacePatch) -> ProjectionPair:
    bz = np.atleast_1d(np.asarray(bz, dtype=float))
    if abs(float(bz @ patch.normal)) < TRANSVERSALITY_TOL * np.linalg.norm(bz):
        raise TransversalityError("drift is numerically tangent to the surface")
    M = np.column_stack([bz, patch.tangent.T])
    return ProjectionPair(bz=bz, tangent=patch.tangent, _inv=np.linalg.inv(M))


# ----------------------------------------------------------------------
# phi0 sampling
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """The three perturbation channels and their exponents."""

    alpha1: float = 1.0
    psi0: Callable | None = None
    alpha2: float = 1.0
    xi_sampler: Callable | None = None
    sigma: object = 1.0

    @property
    def alpha(self) -> float:
        return min(self.alpha1, self.alpha2, 1.0)

    def sigma_at(self, x, dim: int) -> np.ndarray:
        if callable(self.sigma):
            return np.asarray(self.sigma(x), dtype=float)
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            return float(s) * np.eye(dim)
        return s


def _orbit_data(field: VectorFieldSpec, x0, T: float, grid_dt: float | None):
    if grid_dt is None:
        grid_dt = T / 1000.0
    nsteps = max(int(math.ceil(T / grid_dt)), 8)
    grid = np.linspace(0.0, T, nsteps + 1)
    orbit = linearize_along_orbit(field, x0, grid)
    conds = np.linalg.cond(orbit.linearizations)
    if np.max(conds) > CONDITION_LIMIT:
        raise ConditioningError(
            f"fundamental matrix condition number {np.max(conds):.3g}")
    return orbit


def _integrand_matrices(field, orbit, pert: PerturbationSpec):
    d = field.dim
    inv = np.linalg.inv(orbit.linearizations)
    sig = np.stack([pert.sigma_at(x, d) for x in orbit.states])
    return np.einsum("nij,njk->nik", inv, sig)


def phi0_sample(field: VectorFieldSpec, x0, T: float, pert: PerturbationSpec,
                seed, n: int = 1, grid_dt: float | None = None) -> np.ndarray:
    """Draw ``n`` samples of ``phi0(T)``.

    The stochastic integral is simulated on the deterministic orbit grid
    with exact Gaussian increments of the left-endpoint-frozen
    integrand.
    """
    gen = seed if isinstance(seed, np.random.Generator) else single_generator(seed)
    orbit = _orbit_data(field, x0, T, grid_dt)
    d = field.dim
    a = pert.alpha
    PhiT = orbit.linearizations[-1]
    out = np.zeros((n, d))

    if pert.alpha2 == a and pert.xi_sampler is not None:
        xi = np.stack([np.atleast_1d(np.asarray(pert.xi_sampler(gen), dtype=float))
                       for _ in range(n)])
        out += xi @ PhiT.T

    if pert.alpha1 == a and pert.psi0 is not None:
        inv = np.linalg.inv(orbit.linearizations)
        vals = np.stack([inv[i] @ np.asarray(pert.psi0(orbit.states[i]), dtype=float)
                         for i in range(len(orbit.times))])
        integral = np.trapezoid(vals, orbit.times, axis=0)
        out += np.tile(PhiT @ integral, (n, 1))

    if a == 1.0:
        M = _integrand_matrices(field, orbit, pert)
        dts = np.diff(orbit.times)
        acc = np.zeros((n, d))
        for i in range(dts.size):
            dW = math.sqrt(dts[i]) * gen.standard_normal((n, d))
            acc += dW @ M[i].T
        out += acc @ PhiT.T
    return out


def phi0_gaussian_params(field: VectorFieldSpec, x0, T: float,
                         pert: PerturbationSpec,
                         grid_dt: float | None = None):
    """Mean and noise covariance of ``phi0(T)`` (xi contribution excluded)."""
    orbit = _orbit_data(field, x0, T, grid_dt)
    d = field.dim
    a = pert.alpha
    PhiT = orbit.linearizations[-1]
    mean = np.zeros(d)
    if pert.alpha1 == a and pert.psi0 is not None:
        inv = np.linalg.inv(orbit.linearizations)
        vals = np.stack([inv[i] @ np.asarray(pert.psi0(orbit.states[i]), dtype=float)
                         for i in range(len(orbit.times))])
        mean = PhiT @ np.trapezoid(vals, orbit.times, axis=0)
    cov = np.zeros((d, d))
    if a == 1.0:
        M = _integrand_matrices(field, orbit, pert)
        dts = np.diff(orbit.times)
        inner = np.einsum("nij,nkj,n->ik", M[:-1], M[:-1], dts)
        cov = PhiT @ inner @ PhiT.T
    return mean, cov


def far_field_transport(field: VectorFieldSpec, x_base, T: float,
                        xi_samples: np.ndarray, alpha: float, seed,
                        grid_dt: float | None = None,
                        sigma: object = 1.0) -> np.ndarray:
    """Transport corrections along the orbit of ``x_base`` for time ``T``.

    Returns samples of ``Phi(T) xi + 1{alpha=1} N`` with ``N`` the
    orbit-grid stochastic integral; this is the far-from-origin
    evolution law of an ``eps^alpha`` initial perturbation.
    """
    xi_samples = np.atleast_2d(np.asarray(xi_samples, dtype=float))
    n = xi_samples.shape[0]
    pert = PerturbationSpec(alpha1=np.inf, psi0=None, alpha2=alpha,
                            xi_sampler=None, sigma=sigma)
    orbit = _orbit_data(field, x_base, T, grid_dt)
    PhiT = orbit.linearizations[-1]
    out = xi_samples @ PhiT.T
    if alpha == 1.0:
        gen = seed if isinstance(seed, np.random.Generator) else single_generator(seed)
        M = _integrand_matrices(field, orbit, pert)
        dts = np.diff(orbit.times)
        acc = np.zeros_like(out)
        for i in range(dts.size):
            dW = math.sqrt(dts[i]) * gen.standard_normal((n, field.dim))
            acc += dW @ M[i].T
        out = out + acc @ PhiT.T
    return out


# ----------------------------------------------------------------------
# The exit-correction law
# ----------------------------------------------------------------------

@dataclass
class ExitCorrectionLaw:
    """Sampler for the rescaled exit correction ``(-pi_b, pi_M) phi0(T)``.

    The Monte Carlo harness compares ``eps^{-alpha} (tau_eps - T,
    X(tau_eps) - z)`` against this law.  ``gaussian_params`` gives the
    projected mean/covariance of the (Gaussian) noise-plus-drift part.
    """

    field: VectorFieldSpec
    x0: np.ndarray
    T: float
    z: np.ndarray
    pert: PerturbationSpec
    projections: ProjectionPair
    grid_dt: float | None = None

    def sample(self, seed, n: int) -> dict:
        phi = phi0_sample(self.field, self.x0, self.T, self.pert, seed, n,
                          self.grid_dt)
        pb, pm = self.projections.decompose_many(phi)
        return {"time": -pb, "tangent": pm, "phi0": phi}

    def gaussian_params(self):
        mean, cov = phi0_gaussian_params(self.field, self.x0, self.T,
                                         self.pert, self.grid_dt)
        inv = self.projections._inv
        mean_p = inv @ mean
        cov_p = inv @ cov @ inv.T
        # time component carries the minus sign of -pi_b
        mean_p = np.concatenate([[-mean_p[0]], mean_p[1:]])
        flip = np.diag(np.concatenate([[-1.0], np.ones(cov_p.shape[0] - 1)]))
        return mean_p, flip @ cov_p @ flip.T


def exit_correction_law(field: VectorFieldSpec, domain: DomainSpec, x0,
                        pert: PerturbationSpec, probe_dt: float = 1e-2,
                        grid_dt: float | None = None,
                        horizon: float = 1e4) -> ExitCorrectionLaw:
    check = check_levinson(field, domain, x0, probe_dt, horizon=horizon)
    if check.holds is not True:
        raise LevinsonPreconditionError(
            f"orbit check returned status {check.status!r}")
    patch = patch_from_domain(domain, check.exit_point, check.face_id)
    proj = make_projections(field.drift_at(check.exit_point), patch)
    return ExitCorrectionLaw(field=field, x0=np.atleast_1d(np.asarray(x0, float)),
                             T=check.T, z=check.exit_point, pert=pert,
                             projections=proj, grid_dt=grid_dt)


# ----------------------------------------------------------------------
# Rectification residuals
# ----------------------------------------------------------------------

def rectification_residual(field: VectorFieldSpec, z, t: float, x):
    """``r_pm(t, x) = S^{+-t} x - (x +- t b(z))``."""
    from .dynamics import flow_evolve

    x = np.atleast_1d(np.asarray(x, dtype=float))
    bz = field.drift_at(np.atleast_1d(np.asarray(z, dtype=float)))
    r_plus = flow_evolve(field, x, t) - (x + t * bz)
    r_minus = flow_evolve(field, x, -t) - (x - t * bz)
    return r_plus, r_minus


# ----------------------------------------------------------------------
# Conditioned 1-d diffusions
# ----------------------------------------------------------------------

def _log_h_grid(b1d, sigma1d, eps: float, grid: np.ndarray) -> np.ndarray:
    """log h_eps on the grid, cumulative trapezoid of -(2/eps^2) b/sigma^2."""
    bv = np.asarray([b1d(float(y)) for y in grid], dtype=float) \
        if not _vectorizes(b1d, grid) else np.asarray(b1d(grid), dtype=float)
    sv = _eval_sigma(sigma1d, grid)
    if np.any(sv == 0.0):
        raise SingularIntegrandError("sigma vanishes on the integration range")
    slope = -(2.0 / eps ** 2) * bv / sv ** 2
    incr = 0.5 * (slope[1:] + slope[:-1]) * np.diff(grid)
    return np.concatenate([[0.0], np.cumsum(incr)])


def _vectorizes(fn, grid):
    try:
        out = np.asarray(fn(grid), dtype=float)
        return out.shape == grid.shape
    except Exception:
        return False


def _eval_sigma(sigma1d, grid):
    if callable(sigma1d):
        if _vectorizes(sigma1d, grid):
            return np.asarray(sigma1d(grid), dtype=float)
        return np.asarray([sigma1d(float(y)) for y in grid], dtype=float)
    return np.full(grid.shape, float(sigma1d))


def _log_segment_integrals(L: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """log of int e^L over each grid cell, exact for piecewise-linear L."""
    h = np.diff(grid)
    dL = np.diff(L)
    top = np.maximum(L[1:], L[:-1])
    ad = np.abs(dL)
    # int_0^h e^{a + s*d/h} ds = h e^{top} (1 - e^{-|d|}) / |d|
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(ad > 1e-12, (1.0 - np.exp(-ad)) / ad,
                          1.0 - ad / 2.0)
    return top + np.log(h * factor)


def _logcumsumexp(x: np.ndarray) -> np.ndarray:
    return np.logaddexp.accumulate(x)


def _refined_grid(b1d, sigma1d, eps, a1, x, base_n: int = 2049,
                  fine_n: int = 4097):
    coarse = np.linspace(a1, x, base_n)
    bv = _eval_sigma(b1d, coarse) if callable(b1d) else np.full(coarse.shape, b1d)
    sv = _eval_sigma(sigma1d, coarse)
    scale = eps ** 2 * np.min(sv ** 2) / (2.0 * max(np.max(np.abs(bv)), 1e-12))
    w = min(x - a1, 60.0 * scale)
    pieces = [coarse]
    if w > 0:
        pieces.append(np.linspace(x - w, x, fine_n))
    # refine around interior maxima of log h (sign changes of b)
    sign_change = np.flatnonzero(np.diff(np.sign(bv)) != 0)
    for i in sign_change:
        c = coarse[i]
        pieces.append(np.linspace(max(a1, c - w), min(x, c + w), fine_n // 2))
    return np.unique(np.concatenate(pieces))


def conditioned_drift(b1d, sigma1d, epsilon: float, x: float, a1: float) -> float:
    """Drift of the diffusion conditioned to exit at the right endpoint.

    ``b(x) + eps^2 sigma^2(x) h_eps(x) / int_{a1}^x h_eps`` with the
    ratio evaluated in log space on a grid refined near the maxima of
    ``log h_eps``.
    """
    if x <= a1:
        raise ValueError("need x > a1")
    grid = _refined_grid(b1d, sigma1d, epsilon, a1, x)
    L = _log_h_grid(b1d, sigma1d, epsilon, grid)
    seg = _log_segment_integrals(L, grid)
    m = np.max(seg)
    log_integral = m + math.log(np.sum(np.exp(seg - m)))
    if not np.isfinite(log_integral):
        raise SingularIntegrandError("conditioned-drift quadrature overflowed")
    bx = float(b1d(x)) if callable(b1d) else float(b1d)
    sx = float(_eval_sigma(sigma1d, np.array([x]))[0])
    return bx + epsilon ** 2 * sx ** 2 * math.exp(L[-1] - log_integral)


def conditioned_drift_table(b1d, sigma1d, epsilon: float, lo: float,
                            hi: float, a1: float, n: int = 200_001):
    """Vectorized ``b_eps`` table on ``[lo, hi]`` for kernel interpolation."""
    if not a1 < lo < hi:
        raise ValueError("need a1 < lo < hi")
    grid = np.linspace(a1, hi, n)
    L = _log_h_grid(b1d, sigma1d, epsilon, grid)
    seg = _log_segment_integrals(L, grid)
    logJ = _logcumsumexp(seg)
    bv = _eval_sigma(b1d, grid) if callable(b1d) else np.full(grid.shape, float(b1d))
    sv = _eval_sigma(sigma1d, grid)
    with np.errstate(over="ignore"):
        beps = bv[1:] + epsilon ** 2 * sv[1:] ** 2 * np.exp(L[1:] - logJ)
    keep = grid[1:] >= lo
    return grid[1:][keep], beps[keep]


def conditioned_variance(b1d, sigma1d, x0: float, a2: float,
                         atol: float = 1e-10) -> float:
    """``-int_{x0}^{a2} sigma^2(y)/b(y)^3 dy`` by adaptive quadrature."""
    probe = np.linspace(x0, a2, 257)
    bv = _eval_sigma(b1d, probe) if callable(b1d) else np.full(probe.shape, b1d)
    if np.any(bv >= 0.0):
        raise SingularIntegrandError("b must stay negative on [x0, a2]")

    def f(y):
        b = float(b1d(y)) if callable(b1d) else float(b1d)
        s = float(_eval_sigma(sigma1d, np.array([y]))[0])
        return -s ** 2 / b ** 3

    val, err = integrate.quad(f, x0, a2, epsabs=atol, epsrel=1e-12, limit=200)
    if err > 100 * atol + 1e-8 * abs(val):
        raise SingularIntegrandError(f"quadrature error {err:.3g} too large")
    return float(val)
