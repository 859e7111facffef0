"""Planar normal forms at a saddle.

Homogeneous polynomial algebra, resonance enumeration for eigenvalue
pairs ``(lp, -lm)``, homological-equation solving, and the iterative
near-identity conjugation that reduces a polynomial saddle field to
``A y + P(y)`` with ``P`` purely resonant.  Also derives the diffusion
and Ito-correction data of the conjugated SDE.

Resonance of a multi-index ``alpha`` in component ``j`` means
``lambda . alpha = lambda_j`` with ``lambda = (lp, -lm)``.  When the
eigenvalue ratio is supplied as a rational number the resonance test is
exact integer arithmetic; otherwise a 1e-9 tolerance applies and a would
-be divisor below it raises :class:`SmallDivisorError`.

Conventions: component labels ``j`` are 1-based; each stage map
``theta_k(u) = u + h_k(u)`` sends normal-form-side coordinates toward
the original ones, so ``g = theta_2 o ... o theta_R`` is polynomial and
``f = g^{-1}`` is evaluated by per-stage fixed-point iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

RESONANCE_TOL = 1e-9


class SmallDivisorError(ArithmeticError):
    """Near-resonant divisor below tolerance without exact resonance."""


class BoxDomainError(ValueError):
    """Evaluation requested outside the conjugation box."""


class MultiIndex(NamedTuple):
    a1: int
    a2: int

    @property
    def order(self) -> int:
        return self.a1 + self.a2


@dataclass
class HomogeneousPoly:
    """A vector polynomial with all monomials of one fixed degree.

    ``coefficients`` maps ``(MultiIndex, component)`` to the real
    coefficient of ``x^alpha e_j``; components are 1-based.  The space of
    such polynomials has dimension ``2 * (degree + 1)``.
    """

    degree: int
    coefficients: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        clean = {}
        for (alpha, j), c in self.coefficients.items():
            alpha = MultiIndex(*alpha)
            if alpha.order != self.degree:
                raise ValueError(f"index {alpha} has order {alpha.order}, "
                                 f"expected {self.degree}")
            if j not in (1, 2):
                raise ValueError("component must be 1 or 2")
            if c != 0.0:
                clean[(alpha, j)] = float(c)
        self.coefficients = clean

    @property
    def space_dimension(self) -> int:
        return 2 * (self.degree + 1)

    def is_zero(self) -> bool:
        return not self.coefficients

    def get(self, a1: int, a2: int, j: int) -> float:
        return self.coefficients.get((MultiIndex(a1, a2), j), 0.0)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for (alpha, j), c in self.coefficients.items():
            out[..., j - 1] += c * y[..., 0] ** alpha.a1 * y[..., 1] ** alpha.a2
        return out


def _as_lambda(lp, lm):
    return lp, -lm


def _ratio_fractions(lp, lm, ratio):
    """Exact (lp, lm) as Fractions when available, else None."""
    if isinstance(lp, Fraction) and isinstance(lm, Fraction):
        return lp, lm
    if ratio is not None:
        p, q = ratio
        return Fraction(int(p)), Fraction(int(q))
    return None


def homological_eigenvalue(alpha, j: int, lp: float, lm: float) -> float:
    """Eigenvalue ``lambda . alpha - lambda_j`` of ``x^alpha e_j``."""
    a = MultiIndex(*alpha)
    if a.order < 2:
        raise ValueError("multi-index order must be at least 2")
    l1, l2 = _as_lambda(float(lp), float(lm))
    lam_j = l1 if j == 1 else l2
    return a.a1 * l1 + a.a2 * l2 - lam_j


def resonant_indices(lp, lm, r: int, ratio=None,
                     tol: float = RESONANCE_TOL) -> set:
    """All resonant ``(MultiIndex, component)`` pairs of order ``r``.

    Solves the two closed-form candidate indices

        alpha^+(r) = ((lp + r*lm) / (lp + lm), (r-1)*lp / (lp + lm))
        alpha^-(r) = ((r-1)*lm / (lp + lm), (r*lp + lm) / (lp + lm))

    for components 1 and 2 and keeps the integer solutions.  With a
    rational ratio integrality is decided exactly.
    """
    if r < 2:
        raise ValueError("order must be at least 2")
    if lp <= 0 or lm <= 0:
        raise ValueError("rates must be positive")
    out = set()
    frac = _ratio_fractions(lp, lm, ratio)
    if frac is not None:
        fp, fm = frac
        tot = fp + fm
        cands = [((fp + r * fm) / tot, Fraction(r) - (fp + r * fm) / tot, 1),
                 ((Fraction(r - 1) * fm) / tot,
                  Fraction(r) - (Fraction(r - 1) * fm) / tot, 2)]
        for a1, a2, j in cands:
            if a1.denominator == 1 and a2.denominator == 1 and a1 >= 0 and a2 >= 0:
                out.add((MultiIndex(int(a1), int(a2)), j))
        return out
    tot = lp + lm
    cands = [((lp + r * lm) / tot, (r - 1) * lp / tot, 1),
             ((r - 1) * lm / tot, (r * lp + lm) / tot, 2)]
    for a1f, a2f, j in cands:
        a1, a2 = round(a1f), round(a2f)
        if a1 < 0 or a2 < 0 or a1 + a2 != r:
            continue
        if abs(homological_eigenvalue((a1, a2), j, lp, lm)) <= tol:
            out.add((MultiIndex(a1, a2), j))
    return out


def _check_diag_saddle(A) -> tuple[float, float]:
    A = np.asarray(A, dtype=float)
    if A.shape != (2, 2) or A[0, 1] != 0.0 or A[1, 0] != 0.0:
        raise ValueError("A must be 2x2 diagonal")
    lp, mlm = A[0, 0], A[1, 1]
    if lp <= 0 or mlm >= 0:
        raise ValueError("A must be diag(lp, -lm) with lp, lm > 0")
    return lp, -mlm


def solve_homological(A, bk: HomogeneousPoly, ratio=None,
                      tol: float = RESONANCE_TOL):
    """Split ``bk = L h_k + residual`` coefficientwise.

    Non-resonant coefficients are divided by their eigenvalue into
    ``h_k``; resonant ones pass through untouched.  A divisor smaller
    than ``tol`` without exact resonance raises
    :class:`SmallDivisorError`.
    """
    lp, lm = _check_diag_saddle(A)
    if bk.degree < 2:
        raise ValueError("bk must have degree at least 2")
    exact = ratio is not None
    res_set = resonant_indices(lp, lm, bk.degree, ratio=ratio, tol=tol) \
        if exact else None
    h = {}
    resid = {}
    for (alpha, j), c in bk.coefficients.items():
        eig = homological_eigenvalue(alpha, j, lp, lm)
        resonant = (alpha, j) in res_set if exact else eig == 0.0
        if resonant:
            resid[(alpha, j)] = c
            continue
        if abs(eig) < tol:
            raise SmallDivisorError(
                f"divisor {eig:.3e} at {(tuple(alpha), j)} is below {tol:g} "
                "but not an exact resonance")
        h[(alpha, j)] = c / eig
    return (HomogeneousPoly(bk.degree, h), HomogeneousPoly(bk.degree, resid))


# ----------------------------------------------------------------------
# Dense truncated series in two variables
# ----------------------------------------------------------------------
# coeffs[j, a1, a2] holds the coefficient of x1^a1 x2^a2 in component j;
# entries with a1 + a2 > R stay zero.

def _series_zero(R):
    return np.zeros((2, R + 1, R + 1))


def _scalar_mul(a, b, R):
    out = np.zeros((R + 1, R + 1))
    for a1 in range(R + 1):
        for a2 in range(R + 1 - a1):
            c = a[a1, a2]
            if c == 0.0:
                continue
            rem = R - a1 - a2
            for b1 in range(rem + 1):
                out[a1 + b1, a2:a2 + rem - b1 + 1] += c * b[b1, :rem - b1 + 1]
    return out


def _series_eval_scalar(a, pts):
    pts = np.asarray(pts, dtype=float)
    R = a.shape[0] - 1
    p1 = np.vander(pts[..., 0].ravel(), R + 1, increasing=True)
    p2 = np.vander(pts[..., 1].ravel(), R + 1, increasing=True)
    vals = np.einsum("na,ab,nb->n", p1, a, p2)
    return vals.reshape(pts.shape[:-1])


def _series_eval(F, pts):
    pts = np.asarray(pts, dtype=float)
    out = np.empty(pts.shape)
    out[..., 0] = _series_eval_scalar(F[0], pts)
    out[..., 1] = _series_eval_scalar(F[1], pts)
    return out


def _series_compose(F, G, R):
    """F(G) truncated to total degree R; G must have no constant term."""
    if np.any(G[:, 0, 0] != 0.0):
        raise ValueError("composition inner series must vanish at 0")
    one = np.zeros((R + 1, R + 1))
    one[0, 0] = 1.0
    pow1 = [one]
    pow2 = [one]
    for _ in range(R):
        pow1.append(_scalar_mul(pow1[-1], G[0], R))
        pow2.append(_scalar_mul(pow2[-1], G[1], R))
    out = _series_zero(R)
    for j in range(2):
        for a1 in range(R + 1):
            for a2 in range(R + 1 - a1):
                c = F[j, a1, a2]
                if c == 0.0:
                    continue
                out[j] += c * _scalar_mul(pow1[a1], pow2[a2], R)
    return out


def _series_partial(a, var):
    out = np.zeros_like(a)
    if var == 0:
        for a1 in range(1, a.shape[0]):
            out[a1 - 1, :] += a1 * a[a1, :]
    else:
        for a2 in range(1, a.shape[1]):
            out[:, a2 - 1] += a2 * a[:, a2]
    return out


def _poly_to_series(E, C, R):
    F = _series_zero(R)
    for m in range(E.shape[0]):
        a1, a2 = int(E[m, 0]), int(E[m, 1])
        if a1 + a2 > R:
            raise ValueError(f"drift degree {a1 + a2} exceeds transform order {R}")
        F[0, a1, a2] += C[m, 0]
        F[1, a1, a2] += C[m, 1]
    return F


def _degree_part(F, k) -> HomogeneousPoly:
    coeffs = {}
    for j in range(2):
        for a1 in range(k + 1):
            c = F[j, a1, k - a1]
            if c != 0.0:
                coeffs[(MultiIndex(a1, k - a1), j + 1)] = c
    return HomogeneousPoly(k, coeffs)


def _hpoly_to_series(h: HomogeneousPoly, R):
    F = _series_zero(R)
    for (alpha, j), c in h.coefficients.items():
        F[j - 1, alpha.a1, alpha.a2] = c
    return F


def _stage_pushforward(F, h_series, R):
    """New field ``(grad theta)^{-1} (F o theta)`` for ``theta = id + h``."""
    ident = _series_zero(R)
    ident[0, 1, 0] = 1.0
    ident[1, 0, 1] = 1.0
    theta = ident + h_series
    F_comp = _series_compose(F, theta, R)
    # Neumann series for (I + grad h)^{-1}
    J = [[_series_partial(h_series[i], v) for v in range(2)] for i in range(2)]
    inv = [[_series_zero(R)[0] for _ in range(2)] for _ in range(2)]
    inv[0][0][0, 0] = 1.0
    inv[1][1][0, 0] = 1.0
    term = [[inv[i][v].copy() for v in range(2)] for i in range(2)]
    for _ in range(R):
        new = [[_series_zero(R)[0] for _ in range(2)] for _ in range(2)]
        nonzero = False
        for i in range(2):
            for v in range(2):
                acc = np.zeros_like(new[i][v])
                for m in range(2):
                    acc -= _scalar_mul(term[i][m], J[m][v], R)
                new[i][v] = acc
                if np.any(acc != 0.0):
                    nonzero = True
        for i in range(2):
            for v in range(2):
                inv[i][v] += new[i][v]
        term = new
        if not nonzero:
            break
    out = _series_zero(R)
    for i in range(2):
        for v in range(2):
            out[i] += _scalar_mul(inv[i][v], F_comp[v], R)
    return out


# ----------------------------------------------------------------------
# The transform result
# ----------------------------------------------------------------------

@dataclass
class NormalFormResult:
    """Conjugation data ``(grad g)^{-1} b(g(y)) = A y + P(y)`` on a box.

    ``stages`` holds the near-identity maps ``theta_k = id + h_k``
    ordered by degree; ``g = theta_2 o ... o theta_R`` maps normal-form
    coordinates to original ones and ``f`` is its inverse.  ``delta``
    and ``delta_prime`` are the inner and conjugation box half-widths;
    ``truncation_bound`` is the measured sup-norm of the conjugation
    residual on the ``delta`` box.
    """

    lp: float
    lm: float
    order: int
    stages: list  # [(k, HomogeneousPoly h_k)]
    resonant_parts: list  # [HomogeneousPoly], possibly empty
    delta_prime: float
    delta: float
    truncation_bound: float
    _drift_series: np.ndarray = dc_field(repr=False, default=None)

    @property
    def A(self) -> np.ndarray:
        return np.diag([self.lp, -self.lm])

    @property
    def transforms(self) -> list:
        return list(self.stages)

    # -- evaluation ----------------------------------------------------

    def _stage_series(self):
        return [(k, _hpoly_to_series(h, self.order)) for k, h in self.stages]

    def normal_form_drift(self, y):
        """``A y + P(y)`` for points of shape (..., 2)."""
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape)
        out[..., 0] = self.lp * y[..., 0]
        out[..., 1] = -self.lm * y[..., 1]
        for p in self.resonant_parts:
            out = out + p(y)
        return out

    def resonant_poly(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for p in self.resonant_parts:
            out = out + p(y)
        return out

    def g(self, y):
        """Map normal-form coordinates to original ones."""
        v = np.asarray(y, dtype=float).copy()
        for k, h in reversed(self.stages):
            v = v + h(v)
        return v

    def f(self, x, tol: float = 1e-14, max_iter: int = 200):
        """Inverse of ``g`` by per-stage fixed-point iteration."""
        v = np.asarray(x, dtype=float).copy()
        for k, h in self.stages:
            w = v.copy()
            for _ in range(max_iter):
                w_next = v - h(w)
                if np.max(np.abs(w_next - w)) < tol:
                    w = w_next
                    break
                w = w_next
            v = w
        return v

    def g_jac(self, y):
        """Jacobian of ``g`` at points of shape (..., 2) -> (..., 2, 2)."""
        v, J, _ = self.g_with_derivs(np.asarray(y, dtype=float), hessian=False)
        return J

    def f_jac(self, x):
        y = self.f(x)
        J = self.g_jac(y)
        return np.linalg.inv(J)

    def g_with_derivs(self, y, hessian: bool = True):
        """Value, Jacobian, and (optionally) Hessians of ``g``.

        Hessian output has shape (..., 2, 2, 2) with ``H[..., i, a, b]``
        the second derivative of component ``i``.
        """
        y = np.asarray(y, dtype=float)
        shp = y.shape[:-1]
        v = y.reshape(-1, 2).copy()
        n = v.shape[0]
        J = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        H = np.zeros((n, 2, 2, 2))
        for k, h in reversed(self.stages):
            Jh = _hpoly_jacobian(h, v)        # (n, 2, 2)
            Jtheta = np.eye(2) + Jh
            if hessian:
                Hh = _hpoly_hessian(h, v)     # (n, 2, 2, 2)
                Hnew = np.einsum("nij,njab->niab", Jtheta, H)
                Hnew += np.einsum("npa,nipq,nqb->niab", J, Hh, J)
                H = Hnew
            J = np.einsum("nij,njk->nik", Jtheta, J)
            v = v + h(v)
        return (v.reshape(shp + (2,)), J.reshape(shp + (2, 2)),
                H.reshape(shp + (2, 2, 2)) if hessian else None)

    def require_in_box(self, y, half_width: float | None = None):
        hw = self.delta_prime if half_width is None else half_width
        if np.any(np.abs(y) > hw + 1e-12):
            raise BoxDomainError(f"point outside the (+-{hw:g})^2 box")

    def check_roundtrip(self, n: int = 50) -> float:
        """Max |g(f(x)) - x| on an n x n grid inside the inner box."""
        s = np.linspace(-self.delta, self.delta, n)
        X = np.stack(np.meshgrid(s, s), axis=-1).reshape(-1, 2)
        Xg = self.g(X)
        back = self.g(self.f(Xg))
        return float(np.max(np.abs(back - Xg)))

    # -- serialization ---------------------------------------------------

    def to_json(self) -> str:
        def poly_dict(h: HomogeneousPoly):
            return {f"{a.a1},{a.a2},{j}": c for (a, j), c in h.coefficients.items()}

        payload = {
            "schema_version": 1,
            "lp": self.lp,
            "lm": self.lm,
            "order": self.order,
            "stages": [{"degree": k, "coeffs": poly_dict(h)} for k, h in self.stages],
            "resonant": [{"degree": p.degree, "coeffs": poly_dict(p)}
                         for p in self.resonant_parts],
            "delta_prime": self.delta_prime,
            "delta": self.delta,
            "truncation_bound": self.truncation_bound,
        }
        return json.dumps(payload, indent=2)

    @staticmethod
    def from_json(text: str) -> "NormalFormResult":
        d = json.loads(text)

        def parse(entry):
            coeffs = {}
            for key, c in entry["coeffs"].items():
                a1, a2, j = (int(t) for t in key.split(","))
                coeffs[(MultiIndex(a1, a2), j)] = c
            return HomogeneousPoly(entry["degree"], coeffs)

        return NormalFormResult(
            lp=d["lp"], lm=d["lm"], order=d["order"],
            stages=[(e["degree"], parse(e)) for e in d["stages"]],
            resonant_parts=[parse(e) for e in d["resonant"]],
            delta_prime=d["delta_prime"], delta=d["delta"],
            truncation_bound=d["truncation_bound"])


def _hpoly_jacobian(h: HomogeneousPoly, v):
    n = v.shape[0]
    J = np.zeros((n, 2, 2))
    for (alpha, j), c in h.coefficients.items():
        a1, a2 = alpha
        if a1 > 0:
            J[:, j - 1, 0] += c * a1 * v[:, 0] ** (a1 - 1) * v[:, 1] ** a2
        if a2 > 0:
            J[:, j - 1, 1] += c * a2 * v[:, 0] ** a1 * v[:, 1] ** (a2 - 1)
    return J


def _hpoly_hessian(h: HomogeneousPoly, v):
    n = v.shape[0]
    H = np.zeros((n, 2, 2, 2))
    for (alpha, j), c in h.coefficients.items():
        a1, a2 = alpha
        i = j - 1
        if a1 >= 2:
            H[:, i, 0, 0] += c * a1 * (a1 - 1) * v[:, 0] ** (a1 - 2) * v[:, 1] ** a2
        if a2 >= 2:
            H[:, i, 1, 1] += c * a2 * (a2 - 1) * v[:, 0] ** a1 * v[:, 1] ** (a2 - 2)
        if a1 >= 1 and a2 >= 1:
            m = c * a1 * a2 * v[:, 0] ** (a1 - 1) * v[:, 1] ** (a2 - 1)
            H[:, i, 0, 1] += m
            H[:, i, 1, 0] += m
    return H


# ----------------------------------------------------------------------
# The transform itself
# ----------------------------------------------------------------------

def normal_form_transform(field, R: int, ratio=None, box_tol: float = 1e-3,
                          contraction_max: float = 0.5,
                          tol: float = RESONANCE_TOL) -> NormalFormResult:
    """Reduce a polynomial saddle field to normal form up to order ``R``.

    ``field`` must be a polynomial ``VectorFieldSpec`` (or a bare
    ``(exponents, coeffs)`` pair) with ``b(0) = 0`` and linear part
    ``diag(lp, -lm)``.  Degrees ``k = 2..R`` are processed in turn:
    recompose the pushed-forward field, solve the homological equation,
    and absorb the stage map.  Box half-widths are chosen so every stage
    has fixed-point contraction constant at most ``contraction_max`` and
    the measured conjugation residual on the inner box is at most
    ``box_tol``.
    """
    if R < 2:
        raise ValueError("transform order must be at least 2")
    if hasattr(field, "poly_data"):
        if field.poly_data is None:
            raise ValueError("field must be polynomial")
        E, C = field.poly_data
    else:
        E, C = field
    E = np.asarray(E, dtype=np.int64)
    C = np.asarray(C, dtype=float)
    S = _poly_to_series(E, C, R)

    if S[0, 0, 0] != 0.0 or S[1, 0, 0] != 0.0:
        raise ValueError("drift must vanish at the origin")
    if S[0, 0, 1] != 0.0 or S[1, 1, 0] != 0.0:
        raise ValueError("linear part must be diagonal")
    lp, mlm = float(S[0, 1, 0]), float(S[1, 0, 1])
    if lp <= 0 or mlm >= 0:
        raise ValueError("linear part must be diag(lp, -lm), lp, lm > 0")
    lm = -mlm
    A = np.diag([lp, -lm])

    stages = []
    for k in range(2, R + 1):
        bk = _degree_part(S, k)
        if bk.is_zero():
            continue
        hk, resid = solve_homological(A, bk, ratio=ratio, tol=tol)
        if hk.is_zero():
            continue
        S = _stage_pushforward(S, _hpoly_to_series(hk, R), R)
        stages.append((k, hk))
        got = _degree_part(S, k)
        for key in set(got.coefficients) | set(resid.coefficients):
            want = resid.coefficients.get(key, 0.0)
            have = got.coefficients.get(key, 0.0)
            if abs(have - want) > 1e-8 * max(1.0, abs(want)):
                raise AssertionError(
                    f"homological cancellation failed at degree {k}: {key}")
        # snap the verified degree to its exact residual, clearing dust
        for a1 in range(k + 1):
            S[0, a1, k - a1] = resid.get(a1, k - a1, 1)
            S[1, a1, k - a1] = resid.get(a1, k - a1, 2)

    resonant_parts = [p for p in (_degree_part(S, k) for k in range(2, R + 1))
                      if not p.is_zero()]
    _validate_resonant(resonant_parts, lp, lm, ratio, tol)

    nf = NormalFormResult(lp=lp, lm=lm, order=R, stages=stages,
                          resonant_parts=resonant_parts, delta_prime=1.0,
                          delta=0.9, truncation_bound=np.inf,
                          _drift_series=S)
    _choose_box(nf, E, C, box_tol=box_tol, contraction_max=contraction_max)
    return nf


def _validate_resonant(parts, lp, lm, ratio, tol):
    for p in parts:
        res = resonant_indices(lp, lm, p.degree, ratio=ratio, tol=tol)
        for key in p.coefficients:
            if key not in res:
                raise AssertionError(f"non-resonant monomial {key} survived")


def _stage_contraction(nf: NormalFormResult, half_width: float) -> float:
    s = np.linspace(-1.5 * half_width, 1.5 * half_width, 17)
    pts = np.stack(np.meshgrid(s, s), axis=-1).reshape(-1, 2)
    worst = 0.0
    for _, h in nf.stages:
        J = _hpoly_jacobian(h, pts)
        worst = max(worst, float(np.max(np.sum(np.abs(J), axis=2))))
    return worst


def conjugation_residual(nf: NormalFormResult, drift, half_width: float,
                         n: int = 33) -> float:
    """Sup-norm of ``(grad g)^{-1} b(g(y)) - (A y + P(y))`` on a grid."""
    s = np.linspace(-half_width, half_width, n)
    Y = np.stack(np.meshgrid(s, s), axis=-1).reshape(-1, 2)
    X, J, _ = nf.g_with_derivs(Y, hessian=False)
    bx = np.stack([drift(row) for row in X]) if not _vectorized(drift, X) \
        else np.asarray(drift(X), dtype=float)
    pulled = np.linalg.solve(J, bx[..., None])[..., 0]
    target = nf.normal_form_drift(Y)
    return float(np.max(np.abs(pulled - target)))


def _vectorized(fn, X):
    try:
        out = np.asarray(fn(X), dtype=float)
        return out.shape == X.shape
    except Exception:
        return False


def _choose_box(nf: NormalFormResult, E, C, box_tol: float,
                contraction_max: float, shrink: float = 0.8,
                max_iter: int = 120):
    from .fields import PolyDrift

    drift = PolyDrift(E, C)
    dp = 1.0
    for _ in range(max_iter):
        if not nf.stages or _stage_contraction(nf, dp) <= contraction_max:
            break
        dp *= shrink
    else:
        raise RuntimeError("no contraction box found")
    delta = 0.9 * dp
    for _ in range(max_iter):
        bound = conjugation_residual(nf, drift, delta)
        if bound <= box_tol:
            break
        delta *= shrink
    else:
        raise RuntimeError("no box meets the truncation tolerance")
    nf.delta_prime = dp
    nf.delta = delta
    nf.truncation_bound = bound


# ----------------------------------------------------------------------
# Conjugated SDE data
# ----------------------------------------------------------------------

def conjugated_sde_data(nf, sigma, clip_to_box: bool = False):
    """Diffusion and Ito-correction drift of the transformed SDE.

    Returns ``(sigma_tilde, psi_ito)`` with
    ``sigma_tilde(y) = (grad g(y))^{-1} sigma(g(y))`` and
    ``psi_ito(y)_i = 0.5 * tr(Hess f_i(x) a(x))`` at ``x = g(y)``,
    ``a = sigma sigma^T``.  Hessians of ``f`` come from exact polynomial
    derivatives of ``g`` via the inverse-function identity.  Points
    outside the conjugation box raise :class:`BoxDomainError` unless
    ``clip_to_box`` is set.
    """
    sigma_const = None
    if not callable(sigma):
        sigma_const = np.asarray(sigma, dtype=float)
        if sigma_const.ndim == 0:
            sigma_const = float(sigma_const) * np.eye(2)

    def _prep(y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if clip_to_box:
            y = np.clip(y, -nf.delta_prime, nf.delta_prime)
        else:
            nf.require_in_box(y)
        return y

    def sigma_tilde(y):
        y = _prep(y)
        x, J, _ = nf.g_with_derivs(y, hessian=False)
        sig = sigma_const if sigma_const is not None else np.asarray(sigma(x))
        return np.linalg.solve(J, sig)

    def psi_ito(y):
        y = _prep(y)
        x, J, H = nf.g_with_derivs(y, hessian=True)
        sig = sigma_const if sigma_const is not None else np.asarray(sigma(x))
        a = sig @ sig.T
        Jf = np.linalg.inv(J)
        # Hess f_p = -sum_i Jf[p, i] * Jf^T Hg_i Jf
        Hg = H
        JtHJ = np.einsum("pa,ipq,qb->iab", Jf, Hg, Jf)
        Hf = -np.einsum("pi,iab->pab", Jf, JtHJ)
        return 0.5 * np.einsum("pab,ab->p", Hf, a)

    return sigma_tilde, psi_ito
