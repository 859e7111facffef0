"""Path-space rate functional and quasipotential minimization.

The rate functional of a discrete path is the midpoint-rule
discretization of ``(1/2) int <phidot - b(phi), a^{-1}(phi) (phidot -
b(phi))> dt`` (second-order accurate in the step).  The quasipotential
``V(x, y)`` is minimized over interior points of a fixed-endpoint
discrete path, jointly over the total time through a golden-section
search on ``log T``, with an analytic gradient and multi-start
Barzilai-Borwein descent projected onto the domain closure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import VectorFieldSpec
from .geometry import DomainSpec
from .rng import single_generator


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class DiscretePath:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.atleast_2d(np.asarray(self.states, dtype=float))
        if s.shape[0] != t.size:
            raise ValueError("times and states must align")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", s)

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t," + ",".join(f"x{k}" for k in range(self.dim)) + "\n")
            for t, row in zip(self.times, self.states):
                fh.write(f"{t!r}," + ",".join(repr(float(v)) for v in row) + "\n")


def _a_inv_at(a_inv, m):
    if a_inv is None:
        return None
    if callable(a_inv):
        return np.asarray(a_inv(m), dtype=float)
    return np.asarray(a_inv, dtype=float)


def rate_functional(path: DiscretePath, field: VectorFieldSpec,
                    a_inv=None) -> float:
    """Midpoint-rule action of the path under drift ``b`` and ``a^{-1}``.

    ``a_inv`` may be None (identity), a constant matrix, or a callable
    of the midpoint.  Raises on a singular ``a``.
    """
    t, x = path.times, path.states
    h = np.diff(t)
    v = np.diff(x, axis=0) / h[:, None]
    m = 0.5 * (x[1:] + x[:-1])
    r = v - field.drift_many(m)
    total = 0.0
    const_q = _a_inv_at(a_inv, None) if not callable(a_inv) else None
    for i in range(r.shape[0]):
        q = const_q if const_q is not None else _a_inv_at(a_inv, m[i])
        if q is None:
            w = float(r[i] @ r[i])
        else:
            if not np.all(np.isfinite(q)):
                raise ValueError("singular diffusion matrix along the path")
            w = float(r[i] @ q @ r[i])
        total += 0.5 * h[i] * w
    return total


_ZERO_FIELD_CACHE = {}


def _zero_field(dim: int) -> VectorFieldSpec:
    if dim not in _ZERO_FIELD_CACHE:
        _ZERO_FIELD_CACHE[dim] = VectorFieldSpec(
            dim=dim, drift=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
            name="zero")
    return _ZERO_FIELD_CACHE[dim]


def schilder_rate(path: DiscretePath) -> float:
    """Wiener action ``(1/2) sum h |v|^2``; literally the rate functional
    with zero drift and identity diffusion."""
    return rate_functional(path, _zero_field(path.dim), a_inv=None)


# ----------------------------------------------------------------------
# Discretized action with analytic gradient
# ----------------------------------------------------------------------

def action_value(x: np.ndarray, T: float, field: VectorFieldSpec,
                 a_inv=None) -> float:
    n = x.shape[0]
    h = T / (n - 1)
    v = np.diff(x, axis=0) / h
    m = 0.5 * (x[1:] + x[:-1])
    r = v - field.drift_many(m)
    if a_inv is None:
        return 0.5 * h * float(np.sum(r * r))
    if not callable(a_inv):
        return 0.5 * h * float(np.sum(r * (r @ np.asarray(a_inv).T)))
    total = 0.0
    for i in range(r.shape[0]):
        total += 0.5 * h * float(r[i] @ _a_inv_at(a_inv, m[i]) @ r[i])
    return total


def action_and_grad(x: np.ndarray, T: float, field: VectorFieldSpec,
                    a_inv=None, fd_a_step: float = 1e-6):
    """Action and gradient w.r.t. every node of the uniform-grid path.

    Fully vectorized for constant/identity ``a_inv``; a callable
    ``a_inv`` adds its midpoint-dependence term through central
    differences of ``a_inv`` itself.
    """
    n, d = x.shape
    h = T / (n - 1)
    v = np.diff(x, axis=0) / h
    m = 0.5 * (x[1:] + x[:-1])
    r = v - field.drift_many(m)
    if a_inv is None:
        qr = r
    elif not callable(a_inv):
        qr = r @ np.asarray(a_inv).T
    else:
        qr = np.stack([_a_inv_at(a_inv, m[i]) @ r[i] for i in range(n - 1)])
    total = 0.5 * h * float(np.sum(r * qr))
    J = field.jac_many(m)
    jt_qr = np.einsum("nij,ni->nj", J, qr)
    grad = np.zeros_like(x)
    grad[:-1] += -qr - 0.5 * h * jt_qr
    grad[1:] += qr - 0.5 * h * jt_qr
    if callable(a_inv):
        for i in range(n - 1):
            for c in range(d):
                e = np.zeros(d)
                e[c] = fd_a_step * (1.0 + abs(m[i][c]))
                dq = (_a_inv_at(a_inv, m[i] + e)
                      - _a_inv_at(a_inv, m[i] - e)) / (2 * e[c])
                bump = 0.25 * h * float(r[i] @ dq @ r[i])
                grad[i, c] += bump
                grad[i + 1, c] += bump
    return total, grad


def _project(domain: DomainSpec | None, x: np.ndarray) -> np.ndarray:
    if domain is None:
        return x
    if domain.kind == "box":
        return np.clip(x, domain.lo, domain.hi)
    if domain.kind == "ball":
        d = x - domain.center
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        scale = np.minimum(1.0, domain.radius / np.maximum(norm, 1e-300))
        return domain.center + d * scale
    return x  # other kinds: interior iterates assumed


@dataclass
class QuasipotentialResult:
    V: float
    path: DiscretePath
    T: float
    converged: bool
    n_action_calls: int
    restarts_used: int


def _descend(x0_states, T, field, a_inv, domain, max_iter=400, gtol=1e-8):
    """Projected Barzilai-Borwein descent over interior path nodes.

    Returns ``(f, x, progressed, calls)`` where ``progressed`` is False
    only when not a single descent step was accepted.
    """
    x = x0_states.copy()
    f, g = action_and_grad(x, T, field, a_inv)
    f0 = f
    calls = 1
    step = 1e-3 / (1.0 + np.max(np.abs(g[1:-1])) if g[1:-1].size else 1.0)
    prev_x = None
    prev_g = None
    progressed = False
    stall = 0
    f_last = f
    for it in range(max_iter):
        gi = g[1:-1]
        gnorm = float(np.max(np.abs(gi))) if gi.size else 0.0
        if gnorm < gtol * (1.0 + abs(f)):
            progressed = True  # stationary to tolerance counts as converged
            break
        if it % 5 == 4:
            if f_last - f < 1e-10 * (1.0 + abs(f)):
                stall += 1
                if stall >= 2:
                    break
            else:
                stall = 0
            f_last = f
        if prev_x is not None:
            dx = (x[1:-1] - prev_x).ravel()
            dg = (gi - prev_g).ravel()
            denom = float(dx @ dg)
            if denom > 1e-300:
                step = float(dx @ dx) / denom
            step = min(max(step, 1e-12), 1e3)
        prev_x, prev_g = x[1:-1].copy(), gi.copy()
        accepted = False
        s = step
        for _ in range(40):
            xn = x.copy()
            xn[1:-1] = x[1:-1] - s * gi
            xn = _project(domain, xn)
            fn = action_value(xn, T, field, a_inv)
            calls += 1
            if fn < f:
                x, f = xn, fn
                _, g = action_and_grad(x, T, field, a_inv)
                calls += 1
                accepted = True
                progressed = True
                break
            s *= 0.5
        if not accepted:
            break
    return f, x, progressed or f < f0 or f0 == 0.0, calls


def minimize_quasipotential(field: VectorFieldSpec, a, x, y,
                            domain: DomainSpec | None = None,
                            n_points: int = 200, restarts: int = 5,
                            seed: int = 0, t_bounds=(0.1, 100.0),
                            gs_iters: int = 20,
                            max_iter: int = 300) -> QuasipotentialResult:
    """Minimize the action over fixed-endpoint paths and total time.

    ``a`` is the diffusion matrix ``sigma sigma^T`` (None = identity,
    constant matrix, or callable); internally its inverse enters the
    functional.  The time search is golden-section on ``log T`` over
    ``t_bounds``; each restart perturbs the straight-line initial path.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = x.size
    a_inv = _make_a_inv(a, d)
    gen = single_generator(seed)

    lin = np.linspace(0.0, 1.0, n_points)[:, None]
    base = x[None, :] * (1 - lin) + y[None, :] * lin
    modes = np.sin(np.pi * np.arange(1, 4)[None, :, None] * lin[:, None])

    incumbent = {"V": np.inf, "x": None, "T": None}
    calls = 0
    any_ok = False

    for restart in range(max(restarts, 1)):
        if restart == 0:
            init = base.copy()
        else:
            amp = 0.1 * float(np.max(np.abs(y - x)) or 1.0)
            coef = amp * gen.standard_normal((3, d))
            init = base + np.einsum("nmo,mk->nk", modes, coef)
            init[0], init[-1] = x, y
        init = _project(domain, init)

        lo, hi = math.log(t_bounds[0]), math.log(t_bounds[1])
        phi = (math.sqrt(5.0) - 1.0) / 2.0
        warm = {}

        def eval_T(u):
            nonlocal calls, any_ok
            T = math.exp(u)
            start = warm.get("x", init)
            f, xs, progressed, c = _descend(start, T, field, a_inv, domain,
                                            max_iter=max_iter)
            calls += c
            any_ok = any_ok or progressed
            if f < warm.get("f", np.inf):
                warm.update(f=f, x=xs, T=T)
            return f, xs

        u1, u2 = hi - phi * (hi - lo), lo + phi * (hi - lo)
        f1, x1 = eval_T(u1)
        f2, x2 = eval_T(u2)
        for _ in range(gs_iters):
            if f1 <= f2:
                hi, u2, f2, x2 = u2, u1, f1, x1
                u1 = hi - phi * (hi - lo)
                f1, x1 = eval_T(u1)
            else:
                lo, u1, f1, x1 = u1, u2, f2, x2
                u2 = lo + phi * (hi - lo)
                f2, x2 = eval_T(u2)
        if warm["f"] < incumbent["V"]:
            incumbent = {"V": warm["f"], "x": warm["x"], "T": warm["T"]}

    if incumbent["x"] is None or not np.isfinite(incumbent["V"]):
        raise NonConvergenceError("all restarts failed", best=incumbent)
    if not any_ok and incumbent["V"] > 1e-10:
        raise NonConvergenceError(
            "no restart accepted a single descent step", best=incumbent)
    T = incumbent["T"]
    times = np.linspace(0.0, T, n_points)
    return QuasipotentialResult(V=float(incumbent["V"]),
                                path=DiscretePath(times, incumbent["x"]),
                                T=float(T), converged=any_ok,
                                n_action_calls=calls,
                                restarts_used=max(restarts, 1))


def _make_a_inv(a, d):
    if a is None:
        return None
    if callable(a):
        return lambda m: np.linalg.inv(np.asarray(a(m), dtype=float))
    mat = np.asarray(a, dtype=float)
    if mat.ndim == 0:
        mat = float(mat) * np.eye(d)
    return np.linalg.inv(mat)


# ----------------------------------------------------------------------
# Exit-location prediction
# ----------------------------------------------------------------------

@dataclass
class MinimizerReport:
    points: np.ndarray
    values: np.ndarray
    minimizers: np.ndarray
    min_value: float

    def to_csv(self, path) -> None:
        d = self.points.shape[1]
        with open(path, "w") as fh:
            fh.write(",".join(f"x{k}" for k in range(d)) + ",V\n")
            for p, v in zip(self.points, self.values):
                fh.write(",".join(repr(float(c)) for c in p) + f",{v!r}\n")


def boundary_grid(domain: DomainSpec, per_face: int = 9) -> np.ndarray:
    if domain.kind == "box":
        if domain.dim == 1:
            return np.array([[domain.lo[0]], [domain.hi[0]]])
        if domain.dim == 2:
            pts = []
            xs = np.linspace(domain.lo[0], domain.hi[0], per_face)
            ys = np.linspace(domain.lo[1], domain.hi[1], per_face)
            pts += [[x, domain.lo[1]] for x in xs]
            pts += [[x, domain.hi[1]] for x in xs]
            pts += [[domain.lo[0], y] for y in ys[1:-1]]
            pts += [[domain.hi[0], y] for y in ys[1:-1]]
            return np.asarray(pts)
    if domain.kind == "ball" and domain.dim == 2:
        th = np.linspace(0, 2 * np.pi, 4 * per_face, endpoint=False)
        return domain.center + domain.radius * np.stack(
            [np.cos(th), np.sin(th)], axis=1)
    raise ValueError(f"no default boundary grid for kind {domain.kind!r}")


def exit_location_minimizers(field: VectorFieldSpec, a, x0,
                             domain: DomainSpec, grid=None,
                             tol: float = 1e-3, restarts: int = 2,
                             n_points: int = 160, seed: int = 0) -> MinimizerReport:
    """Rank boundary points by ``V(x0, .)`` and return the minimizing set."""
    if grid is None:
        pts = boundary_grid(domain)
    elif np.isscalar(grid):
        pts = boundary_grid(domain, per_face=int(grid))
    else:
        pts = np.atleast_2d(np.asarray(grid, dtype=float))
    vals = np.empty(pts.shape[0])
    for i, y in enumerate(pts):
        vals[i] = minimize_quasipotential(field, a, x0, y, domain,
                                          n_points=n_points,
                                          restarts=restarts, seed=seed + i).V
    vmin = float(np.min(vals))
    mask = vals <= vmin + tol
    return MinimizerReport(points=pts, values=vals, minimizers=pts[mask],
                           min_value=vmin)
