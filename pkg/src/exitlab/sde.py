"""Path simulation and exit detection.

Euler-Maruyama simulation of

    dX = (b + eps^a1 * Psi_eps) dt + eps * sigma dW,
    X(0) = x0 + eps^a2 * xi_eps,

plus exact Ornstein-Uhlenbeck stepping for the 2-d linear saddle, where
per-step transition Gaussians make grid values exact samples and the
exit time satisfies the Duhamel identity

    tau = -(1/lp) log(eps) + (1/lp) log(delta / |N_eps|)

pathwise, with N_eps the accumulated stochastic integral of
exp(-lp * s) against the first Wiener component.

Paths draw noise in blocks from per-path Philox streams (see
:mod:`exitlab.rng`), so a record is a deterministic function of
``(seed, dt)`` regardless of backend, worker count, or batch grouping.
Boundary crossings are located by linear interpolation of the straddling
segment; an optional Brownian-bridge correction flag exists for the
box-domain engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from ._accel import resolve_backend
from .dynamics import VectorFieldSpec
from .geometry import DomainSpec, boundary_cross, contains, contains_many
from .kernels import (STATUS_ALIVE, STATUS_EXITED, STATUS_NAN,
                      euler_poly_box_block, euler_table1d_block,
                      ou_saddle_block)
from .rng import path_generator, path_key

DEFAULT_HORIZON = 1e4
BLOCK_STEPS = 2048


class NumericalFailureError(RuntimeError):
    def __init__(self, path_index: int, step: int):
        super().__init__(f"NaN state in path {path_index} at step {step}")
        self.path_index = path_index
        self.step = step


class InternalConsistencyError(AssertionError):
    """The pathwise exit-time identity failed beyond tolerance."""


class ConjugationDomainError(RuntimeError):
    """State left the conjugation box before the inner exit box."""


@dataclass(frozen=True)
class InitialLaw:
    """Initial condition ``x0 + eps^alpha2 * xi``.

    ``xi_sampler`` maps a Generator to one draw of xi (or None for a
    deterministic start); draws come from the head of the owning path's
    stream.  ``xi_limit`` records the declared weak limit for reporting.
    """

    x0: np.ndarray
    alpha2: float = 1.0
    xi_sampler: Callable[[np.random.Generator], np.ndarray] | None = None
    xi_limit: str = "point mass at 0"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if self.alpha2 <= 0:
            raise ValueError("alpha2 must be positive")

    def draw(self, eps: float, gen: np.random.Generator) -> np.ndarray:
        if self.xi_sampler is None or eps == 0.0:
            return self.x0.copy()
        xi = np.atleast_1d(np.asarray(self.xi_sampler(gen), dtype=float))
        return self.x0 + eps ** self.alpha2 * xi

    def check_moments(self, seed: int = 0, n: int = 2048, bound: float = 1e6) -> float:
        """Empirical second moment of xi, validated against ``bound``."""
        if self.xi_sampler is None:
            return 0.0
        g = path_generator(seed, 0)
        m2 = float(np.mean([np.sum(np.asarray(self.xi_sampler(g)) ** 2)
                            for _ in range(n)]))
        if not np.isfinite(m2) or m2 > bound:
            raise ValueError(f"xi second moment {m2:.3g} exceeds bound {bound:.3g}")
        return m2


@dataclass(frozen=True)
class SdeSystem:
    field: VectorFieldSpec
    sigma: np.ndarray | Callable[[np.ndarray], np.ndarray]
    initial: InitialLaw
    psi: Callable[[float, np.ndarray], np.ndarray] | None = None
    alpha1: float = 1.0

    def sigma_const(self) -> np.ndarray | None:
        if callable(self.sigma):
            return None
        s = np.asarray(self.sigma, dtype=float)
        if s.ndim == 0:
            s = s * np.eye(self.field.dim)
        return s

    def sigma_at(self, x: np.ndarray) -> np.ndarray:
        s = self.sigma_const()
        if s is not None:
            return s
        return np.asarray(self.sigma(x), dtype=float)

    def check_ellipticity(self, points, floor: float = 1e-12) -> float:
        """Smallest eigenvalue of sigma sigma^T over sample points."""
        lo = np.inf
        for x in points:
            s = self.sigma_at(np.atleast_1d(np.asarray(x, dtype=float)))
            lo = min(lo, float(np.linalg.eigvalsh(s @ s.T).min()))
        if lo < floor:
            raise ValueError(f"sigma sigma^T eigenvalue {lo:.3g} below floor {floor:.3g}")
        return lo


@dataclass(frozen=True)
class ExitRecord:
    tau: float
    exit_point: np.ndarray
    face_id: int
    crossed: bool
    n_steps: int
    seed: int


@dataclass
class ExitBatch:
    """Column-wise exit data for a batch of paths."""

    tau: np.ndarray
    exit_points: np.ndarray
    face_ids: np.ndarray
    crossed: np.ndarray
    n_steps: np.ndarray
    master_seed: int
    extra: dict = dc_field(default_factory=dict)

    def __len__(self):
        return self.tau.size

    def record(self, i: int) -> ExitRecord:
        return ExitRecord(
            tau=float(self.tau[i]),
            exit_point=self.exit_points[i].copy(),
            face_id=int(self.face_ids[i]),
            crossed=bool(self.crossed[i]),
            n_steps=int(self.n_steps[i]),
            seed=path_key(self.master_seed, i),
        )

    def to_csv(self, path) -> None:
        d = self.exit_points.shape[1]
        header = "tau," + ",".join(f"exit_x{k}" for k in range(d)) + ",face,seed"
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(len(self)):
                xs = ",".join(repr(float(v)) for v in self.exit_points[i])
                fh.write(f"{self.tau[i]!r},{xs},{self.face_ids[i]},"
                         f"{path_key(self.master_seed, i)}\n")


def _draw_block(gens, rows, nsteps, d):
    Z = np.empty((rows.size, nsteps, d))
    for r, p in enumerate(rows):
        Z[r] = gens[p].standard_normal((nsteps, d))
    return Z


def _finalize_crossing(domain, x_prev, x_new, step_global, dt):
    crossing = boundary_cross(domain, x_prev, x_new)
    tau = (step_global + crossing.s) * dt
    return tau, crossing.point, crossing.face_id


# ----------------------------------------------------------------------
# Euler-Maruyama batch
# ----------------------------------------------------------------------

def simulate_exit_batch(system: SdeSystem, domain: DomainSpec, epsilon: float,
                        dt: float, seed: int, n_paths: int,
                        horizon: float = DEFAULT_HORIZON,
                        backend: str | None = None,
                        block_steps: int = BLOCK_STEPS,
                        bridge: bool = False,
                        start_points: np.ndarray | None = None) -> ExitBatch:
    """Simulate ``n_paths`` independent exits; deterministic in (seed, dt).

    ``start_points`` (n_paths, d) overrides the initial law with explicit
    per-path starting states (no xi draws are consumed).
    """
    if epsilon < 0 or dt <= 0:
        raise ValueError("need epsilon >= 0 and dt > 0")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    backend = resolve_backend(backend)
    d = system.field.dim
    max_steps = int(math.ceil(horizon / dt))

    gens = [path_generator(seed, i) for i in range(n_paths)]
    if start_points is not None:
        x = np.array(start_points, dtype=float, copy=True)
        if x.shape != (n_paths, d):
            raise ValueError("start_points must have shape (n_paths, dim)")
    else:
        x = np.stack([system.initial.draw(epsilon, gens[i])
                      for i in range(n_paths)])

    tau = np.zeros(n_paths)
    exit_points = np.array(x, copy=True)
    face_ids = np.full(n_paths, -1, dtype=np.int64)
    crossed = np.zeros(n_paths, dtype=bool)
    n_steps = np.zeros(n_paths, dtype=np.int64)

    inside0 = contains_many(domain, x)
    alive = np.flatnonzero(inside0)
    crossed[~inside0] = True  # immediate exit at tau = 0

    sig_const = system.sigma_const()
    kernel_ok = (
        domain.kind == "box"
        and system.field.poly_data is not None
        and sig_const is not None
        and system.psi is None
        and not bridge
    )
    if bridge and domain.kind != "box":
        raise ValueError("bridge correction is implemented for box domains only")

    step_offset = 0
    while alive.size and step_offset < max_steps:
        nsteps = min(block_steps, max_steps - step_offset)
        Z = _draw_block(gens, alive, nsteps, d)
        status = np.zeros(alive.size, dtype=np.int64)
        exit_step = np.full(alive.size, -1, dtype=np.int64)
        x_prev = np.zeros((alive.size, d))
        x_new = np.zeros((alive.size, d))
        xa = np.ascontiguousarray(x[alive])

        if kernel_ok:
            E, C = system.field.poly_data
            euler_poly_box_block(xa, status, exit_step, x_prev, x_new,
                                 E, C, sig_const, epsilon, dt,
                                 domain.lo, domain.hi, Z, backend)
        else:
            _euler_generic_block(system, domain, epsilon, dt, xa, status,
                                 exit_step, x_prev, x_new, Z,
                                 gens, alive, bridge)

        x[alive] = xa
        for r in np.flatnonzero(status == STATUS_NAN):
            raise NumericalFailureError(int(alive[r]),
                                        step_offset + int(exit_step[r]) + 1)
        exited_rows = np.flatnonzero(status == STATUS_EXITED)
        for r in exited_rows:
            p = int(alive[r])
            g = step_offset + int(exit_step[r])
            t, pt, fid = _finalize_crossing(domain, x_prev[r], x_new[r], g, dt)
            tau[p], exit_points[p], face_ids[p] = t, pt, fid
            crossed[p] = True
            n_steps[p] = g + 1
        alive = alive[status == STATUS_ALIVE]
        step_offset += nsteps

    for p in alive:  # horizon reached
        tau[p] = max_steps * dt
        exit_points[p] = x[p]
        n_steps[p] = max_steps

    return ExitBatch(tau=tau, exit_points=exit_points, face_ids=face_ids,
                     crossed=crossed, n_steps=n_steps, master_seed=seed)


def _euler_generic_block(system, domain, epsilon, dt, x, status, exit_step,
                         x_prev, x_new, Z, gens, alive_paths, bridge):
    """Callable-drift engine; same block contract as the kernels."""
    P, B, d = Z.shape
    alive = status == STATUS_ALIVE
    sqdt = math.sqrt(dt)
    sig_const = system.sigma_const()
    for k in range(B):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        xa = x[idx]
        drift = system.field.drift_many(xa)
        if system.psi is not None and epsilon > 0:
            psi = np.stack([np.asarray(system.psi(epsilon, row), dtype=float)
                            for row in xa])
            drift = drift + epsilon ** system.alpha1 * psi
        if sig_const is not None:
            noise = Z[idx, k, :] @ sig_const.T
        else:
            mats = np.stack([system.sigma_at(row) for row in xa])
            noise = np.einsum("pij,pj->pi", mats, Z[idx, k, :])
        xn = xa + drift * dt + (epsilon * sqdt) * noise
        bad = ~np.all(np.isfinite(xn), axis=1)
        outside = ~contains_many(domain, xn, margin=0.0) & ~bad
        done = outside | bad
        if bridge:
            # one uniform per surviving path and step, drawn after the normals
            u = np.array([gens[alive_paths[i]].random() for i in idx])
            hit = _bridge_hit(domain, xa, xn, epsilon, sig_const, dt, u)
            hit &= ~done
            if hit.any():
                # treat as an exit through the interpolated segment midpoint
                mid = 0.5 * (xa + xn)
                for r in np.flatnonzero(hit):
                    xn[r] = _push_outside(domain, mid[r], xn[r])
                done |= hit
                outside |= hit
        if done.any():
            stopped = idx[done]
            x_prev[stopped] = xa[done]
            x_new[stopped] = xn[done]
            exit_step[stopped] = k
            status[stopped] = np.where(bad[done], STATUS_NAN, STATUS_EXITED)
        x[idx] = xn
        alive[idx[done]] = False


def _bridge_hit(domain, xa, xn, epsilon, sig_const, dt, u):
    """Brownian-bridge face-crossing probabilities for box domains."""
    if epsilon == 0.0 or sig_const is None:
        return np.zeros(xa.shape[0], dtype=bool)
    var_diag = np.diag(sig_const @ sig_const.T) * epsilon ** 2 * dt
    p_any = np.zeros(xa.shape[0])
    for kdim in range(xa.shape[1]):
        if var_diag[kdim] == 0:
            continue
        for bound in (domain.lo[kdim], domain.hi[kdim]):
            a0 = bound - xa[:, kdim]
            a1 = bound - xn[:, kdim]
            same_side = (a0 * a1) > 0
            p = np.exp(-2.0 * np.clip(a0 * a1, 0, None) / var_diag[kdim])
            p = np.where(same_side, p, 1.0)
            p_any = np.maximum(p_any, p)
    return u < p_any


def _push_outside(domain, x_mid, x_out):
    # nudge the recorded post state just past the nearest face so the
    # straddle interpolation lands on the boundary
    if contains(domain, x_out, margin=0.0):
        lo, hi = domain.lo, domain.hi
        gaps_lo = x_mid - lo
        gaps_hi = hi - x_mid
        k = int(np.argmin(np.minimum(gaps_lo, gaps_hi)))
        y = x_out.copy()
        y[k] = lo[k] - 1e-12 if gaps_lo[k] < gaps_hi[k] else hi[k] + 1e-12
        return y
    return x_out


def simulate_exit(system: SdeSystem, domain: DomainSpec, epsilon: float,
                  dt: float, seed: int, horizon: float = DEFAULT_HORIZON,
                  backend: str | None = None, bridge: bool = False) -> ExitRecord:
    """Single-path exit; identical to path 0 of a batch under ``seed``."""
    batch = simulate_exit_batch(system, domain, epsilon, dt, seed, 1,
                                horizon=horizon, backend=backend, bridge=bridge)
    return batch.record(0)


def simulate_exit_batch_table1d(table_grid: np.ndarray, table_vals: np.ndarray,
                                sigma: float, domain: DomainSpec,
                                start: float, epsilon: float, dt: float,
                                seed: int, n_paths: int,
                                horizon: float = DEFAULT_HORIZON,
                                backend: str | None = None,
                                block_steps: int = BLOCK_STEPS) -> ExitBatch:
    """1-d Euler exits with a tabulated drift (linear interpolation).

    Used for drifts that are expensive pointwise, e.g. the conditioned
    drift ``b_eps``; queries outside the table clamp to its ends.
    """
    if domain.kind != "box" or domain.dim != 1:
        raise ValueError("table drift runs on interval domains")
    backend = resolve_backend(backend)
    grid_lo = float(table_grid[0])
    grid_dx = float(table_grid[1] - table_grid[0])
    if not np.allclose(np.diff(table_grid), grid_dx, rtol=1e-9):
        raise ValueError("table grid must be uniform")
    table = np.ascontiguousarray(table_vals, dtype=float)
    max_steps = int(math.ceil(horizon / dt))

    gens = [path_generator(seed, i) for i in range(n_paths)]
    x = np.full((n_paths, 1), float(start))
    tau = np.zeros(n_paths)
    exit_points = np.array(x, copy=True)
    face_ids = np.full(n_paths, -1, dtype=np.int64)
    crossed = np.zeros(n_paths, dtype=bool)
    n_steps = np.zeros(n_paths, dtype=np.int64)
    alive = np.arange(n_paths)

    lo, hi = float(domain.lo[0]), float(domain.hi[0])
    step_offset = 0
    while alive.size and step_offset < max_steps:
        nsteps = min(block_steps, max_steps - step_offset)
        Z = _draw_block(gens, alive, nsteps, 1)
        status = np.zeros(alive.size, dtype=np.int64)
        exit_step = np.full(alive.size, -1, dtype=np.int64)
        x_prev = np.zeros((alive.size, 1))
        x_new = np.zeros((alive.size, 1))
        xa = np.ascontiguousarray(x[alive])
        euler_table1d_block(xa, status, exit_step, x_prev, x_new,
                            grid_lo, grid_dx, table, float(sigma), epsilon,
                            dt, lo, hi, Z, backend)
        x[alive] = xa
        for r in np.flatnonzero(status == STATUS_NAN):
            raise NumericalFailureError(int(alive[r]),
                                        step_offset + int(exit_step[r]) + 1)
        for r in np.flatnonzero(status == STATUS_EXITED):
            p = int(alive[r])
            g = step_offset + int(exit_step[r])
            t, pt, fid = _finalize_crossing(domain, x_prev[r], x_new[r], g, dt)
            tau[p], exit_points[p], face_ids[p] = t, pt, fid
            crossed[p] = True
            n_steps[p] = g + 1
        alive = alive[status == STATUS_ALIVE]
        step_offset += nsteps

    for p in alive:
        tau[p] = max_steps * dt
        exit_points[p] = x[p]
        n_steps[p] = max_steps

    return ExitBatch(tau=tau, exit_points=exit_points, face_ids=face_ids,
                     crossed=crossed, n_steps=n_steps, master_seed=seed)


# ----------------------------------------------------------------------
# Exact linear-saddle simulation
# ----------------------------------------------------------------------

def simulate_linear_saddle_exact_batch(lp: float, lm: float, epsilon: float,
                                       x0: float, delta: float, dt: float,
                                       seed: int, n_paths: int,
                                       horizon: float = DEFAULT_HORIZON,
                                       backend: str | None = None,
                                       block_steps: int = BLOCK_STEPS) -> ExitBatch:
    """Exact OU stepping for ``diag(lp, -lm)`` started at ``(0, x0)``.

    Exits through ``x1 = +/- delta``; the returned batch carries the
    terminal stochastic integrals in ``extra["N_eps"]``.  The pathwise
    exit-time identity is asserted to relative tolerance 1e-6.
    """
    if lp <= 0 or lm <= 0:
        raise ValueError("rates must be positive")
    if not 0 < epsilon:
        raise ValueError("epsilon must be positive")
    if abs(x0) >= delta:
        raise ValueError("|x0| must be below delta")
    backend = resolve_backend(backend)
    max_steps = int(math.ceil(horizon / dt))

    gens = [path_generator(seed, i) for i in range(n_paths)]
    N = np.zeros(n_paths)
    x2 = np.full(n_paths, float(x0))
    tau = np.zeros(n_paths)
    exit_points = np.zeros((n_paths, 2))
    face_ids = np.full(n_paths, -1, dtype=np.int64)
    crossed = np.zeros(n_paths, dtype=bool)
    n_steps = np.zeros(n_paths, dtype=np.int64)
    N_eps = np.zeros(n_paths)

    alive = np.arange(n_paths)
    w0, thr0 = 1.0, delta / epsilon
    step_offset = 0
    while alive.size and step_offset < max_steps:
        nsteps = min(block_steps, max_steps - step_offset)
        Z = _draw_block(gens, alive, nsteps, 2)
        status = np.zeros(alive.size, dtype=np.int64)
        exit_step = np.full(alive.size, -1, dtype=np.int64)
        N_hit = np.zeros(alive.size)
        x2_prev = np.zeros(alive.size)
        x2_new = np.zeros(alive.size)
        Na = np.ascontiguousarray(N[alive])
        x2a = np.ascontiguousarray(x2[alive])

        w0, thr0 = ou_saddle_block(Na, x2a, status, exit_step, N_hit,
                                   x2_prev, x2_new, lp, lm, epsilon, dt,
                                   delta, w0, thr0, Z, backend)
        N[alive], x2[alive] = Na, x2a

        for r in np.flatnonzero(status == STATUS_EXITED):
            p = int(alive[r])
            n_exit = N_hit[r]
            t = (math.log(delta / abs(n_exit)) - math.log(epsilon)) / lp
            t_grid = (step_offset + int(exit_step[r]) + 1) * dt
            ident = (-math.log(epsilon) + math.log(delta / abs(n_exit))) / lp
            if abs(t - ident) > 1e-6 * max(1.0, abs(ident)):
                raise InternalConsistencyError(
                    f"exit-time identity violated: tau={t!r} identity={ident!r}")
            frac = min(max((t - (t_grid - dt)) / dt, 0.0), 1.0)
            x2_at_tau = x2_prev[r] + frac * (x2_new[r] - x2_prev[r])
            tau[p] = t
            exit_points[p] = (math.copysign(delta, n_exit), x2_at_tau)
            face_ids[p] = 1 if n_exit > 0 else 0
            crossed[p] = True
            n_steps[p] = step_offset + int(exit_step[r]) + 1
            N_eps[p] = n_exit
        alive = alive[status == STATUS_ALIVE]
        step_offset += nsteps

    for p in alive:
        tau[p] = max_steps * dt
        exit_points[p] = (epsilon * math.exp(min(lp * tau[p], 700.0)) * N[p], x2[p])
        n_steps[p] = max_steps
        N_eps[p] = N[p]

    return ExitBatch(tau=tau, exit_points=exit_points, face_ids=face_ids,
                     crossed=crossed, n_steps=n_steps, master_seed=seed,
                     extra={"N_eps": N_eps})


def simulate_linear_saddle_exact(lp, lm, epsilon, x0, delta, dt, seed,
                                 horizon: float = DEFAULT_HORIZON,
                                 backend: str | None = None):
    """Single-path exact saddle exit; returns ``(record, N_eps)``."""
    batch = simulate_linear_saddle_exact_batch(lp, lm, epsilon, x0, delta, dt,
                                               seed, 1, horizon=horizon,
                                               backend=backend)
    return batch.record(0), float(batch.extra["N_eps"][0])


# ----------------------------------------------------------------------
# Simulation in normal-form coordinates
# ----------------------------------------------------------------------

def simulate_transformed_saddle_batch(nf, sigma, initial: InitialLaw,
                                      epsilon: float, dt: float, seed: int,
                                      n_paths: int,
                                      delta: float | None = None,
                                      horizon: float = DEFAULT_HORIZON,
                                      block_steps: int = BLOCK_STEPS) -> ExitBatch:
    """Simulate the conjugated system in normal-form coordinates.

    The drift is ``A y + P(y) + eps^2 Psi(y)`` with the Ito-correction
    term ``Psi`` and diffusion ``sigma_tilde`` supplied by
    ``normalform.conjugated_sde_data``.  Paths stop on the boundary of
    the inner box ``(-delta, delta)^2``; a state beyond the conjugation
    box ``(-delta', delta')^2`` raises :class:`ConjugationDomainError`.
    """
    from .normalform import conjugated_sde_data

    delta = nf.delta if delta is None else float(delta)
    if not 0 < delta <= nf.delta_prime:
        raise ValueError("need 0 < delta <= conjugation half-width")
    sigma_tilde, psi_ito = conjugated_sde_data(nf, sigma, clip_to_box=True)

    drift_poly = nf.normal_form_drift  # callable A y + P(y)

    field = VectorFieldSpec(dim=2, drift=drift_poly, name="normal-form-drift")
    system = SdeSystem(field=field, sigma=sigma_tilde, initial=initial,
                       psi=lambda eps, y: np.asarray(psi_ito(y)), alpha1=2.0)
    domain = DomainSpec.square(delta)
    batch = simulate_exit_batch(system, domain, epsilon, dt, seed, n_paths,
                                horizon=horizon, backend="numpy",
                                block_steps=block_steps)
    guard = nf.delta_prime + 1e-12
    if np.any(np.abs(batch.exit_points) > guard):
        raise ConjugationDomainError(
            "state left the conjugation box before the inner box")
    return batch


def simulate_transformed_saddle(nf, sigma, initial: InitialLaw, epsilon, dt,
                                seed, delta: float | None = None,
                                horizon: float = DEFAULT_HORIZON) -> ExitRecord:
    batch = simulate_transformed_saddle_batch(nf, sigma, initial, epsilon, dt,
                                              seed, 1, delta=delta,
                                              horizon=horizon)
    return batch.record(0)
