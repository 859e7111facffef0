"""Built-in vector field catalog.

Fields are addressable by name plus a parameter list, and custom
polynomial fields can be declared in config files as an exponent table
plus coefficients.  Polynomial fields carry their coefficient data on
``VectorFieldSpec.poly_data`` so the jit kernels can consume them.

Catalog names: ``linear-saddle``, ``rotated-saddle``,
``gradient-double-well``, ``two-node-network``, ``constant-drift-1d``,
``linear``, ``polynomial``.
"""

from __future__ import annotations

import numpy as np

from .dynamics import VectorFieldSpec


class PolyDrift:
    """Polynomial drift ``b_j(x) = sum_m C[m, j] * prod_k x_k**E[m, k]``."""

    def __init__(self, exponents, coeffs):
        E = np.asarray(exponents, dtype=np.int64)
        C = np.asarray(coeffs, dtype=float)
        if E.ndim != 2 or C.shape != E.shape:
            raise ValueError("exponents and coeffs must both be (M, d)")
        if np.any(E < 0):
            raise ValueError("exponents must be nonnegative")
        self.exponents = E
        self.coeffs = C
        self.dim = E.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mono = np.prod(x[..., None, :] ** self.exponents, axis=-1)  # (..., M)
        return mono @ self.coeffs

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        d = self.dim
        J = np.zeros((d, d))
        for m in range(self.exponents.shape[0]):
            e = self.exponents[m]
            for k in range(d):
                if e[k] == 0:
                    continue
                term = e[k] * x[k] ** (e[k] - 1)
                for kk in range(d):
                    if kk != k:
                        term *= x[kk] ** e[kk]
                J[:, k] += self.coeffs[m] * term
        return J


def polynomial_field(exponents, coeffs, name: str = "polynomial") -> VectorFieldSpec:
    p = PolyDrift(exponents, coeffs)
    return VectorFieldSpec(dim=p.dim, drift=p, jacobian=p.jacobian, name=name,
                           poly_data=(p.exponents, p.coeffs))


def linear_field(A, name: str = "linear") -> VectorFieldSpec:
    """b(x) = A x, stored as a degree-1 polynomial."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    E = np.eye(d, dtype=np.int64)
    return polynomial_field(E, A.T.copy(), name=name)


def affine_field(A, c, name: str = "affine") -> VectorFieldSpec:
    A = np.asarray(A, dtype=float)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    d = c.size
    E = np.vstack([np.zeros((1, d), dtype=np.int64), np.eye(d, dtype=np.int64)])
    C = np.vstack([c[None, :], A.T])
    return polynomial_field(E, C, name=name)


def linear_saddle(lp: float, lm: float) -> VectorFieldSpec:
    """Planar saddle ``diag(lp, -lm)`` with ``lp, lm > 0``."""
    if lp <= 0 or lm <= 0:
        raise ValueError("saddle rates must be positive")
    return linear_field(np.diag([lp, -lm]), name="linear-saddle")


def rotated_saddle(lp: float, lm: float, angle: float) -> VectorFieldSpec:
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    A = R @ np.diag([lp, -lm]) @ R.T
    return linear_field(A, name="rotated-saddle")


def constant_drift(c, dim: int | None = None) -> VectorFieldSpec:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if dim is not None and c.size == 1 and dim > 1:
        c = np.full(dim, float(c[0]))
    d = c.size
    E = np.zeros((1, d), dtype=np.int64)
    return polynomial_field(E, c[None, :], name="constant-drift")


def constant_drift_1d(c: float) -> VectorFieldSpec:
    f = constant_drift([float(c)])
    return VectorFieldSpec(dim=1, drift=f.drift, jacobian=f.jacobian,
                           name="constant-drift-1d", poly_data=f.poly_data)


def gradient_double_well() -> VectorFieldSpec:
    """1-d ``b = -phi'`` for the double well ``phi(x) = x^4/4 - x^2/2 + 1/4``.

    Wells at x = -1, +1 (phi = 0) and barrier at x = 0 (phi = 1/4).
    """
    E = np.array([[1], [3]], dtype=np.int64)
    C = np.array([[1.0], [-1.0]])
    f = polynomial_field(E, C, name="gradient-double-well")
    return f


def double_well_potential(x):
    x = np.asarray(x, dtype=float)
    return x ** 4 / 4 - x ** 2 / 2 + 0.25


def two_node_field(lp: float, lm: float, mup: float, mum: float) -> VectorFieldSpec:
    """Planar field with saddles at (0,0) and (-1,0) joined along the x axis.

    Eigenvalues are ``(lp, -lm)`` at the origin and ``(mup, -mum)`` at
    (-1, 0); the segment between them is a heteroclinic connection, the
    lines x = 0 and x = -1 are invariant, and so is the x axis::

        b1 = lp*x + (2*lp - mum)*x^2 + (lp - mum)*x^3
        b2 = -(lm + (mup + lm)*x) * y
    """
    for r in (lp, lm, mup, mum):
        if r <= 0:
            raise ValueError("all four rates must be positive")
    E = np.array([[1, 0], [2, 0], [3, 0], [0, 1], [1, 1]], dtype=np.int64)
    C = np.array([
        [lp, 0.0],
        [2 * lp - mum, 0.0],
        [lp - mum, 0.0],
        [0.0, -lm],
        [0.0, -(mup + lm)],
    ])
    return polynomial_field(E, C, name="two-node-network")


_CATALOG = {
    "linear": lambda A: linear_field(A),
    "linear-saddle": linear_saddle,
    "rotated-saddle": rotated_saddle,
    "gradient-double-well": lambda: gradient_double_well(),
    "two-node-network": two_node_field,
    "constant-drift-1d": constant_drift_1d,
    "polynomial": polynomial_field,
}


def make_field(name: str, **params) -> VectorFieldSpec:
    """Instantiate a catalog field by name."""
    if name not in _CATALOG:
        raise KeyError(f"unknown field {name!r}; catalog: {sorted(_CATALOG)}")
    return _CATALOG[name](**params)


def field_from_config(cfg: dict) -> VectorFieldSpec:
    """Build a field from a config block ``{"name": ..., "params": {...}}``."""
    name = cfg["name"]
    params = dict(cfg.get("params", {}))
    if name == "polynomial":
        return polynomial_field(params["exponents"], params["coeffs"])
    if name == "linear":
        return linear_field(np.asarray(params["matrix"], dtype=float))
    return make_field(name, **params)
