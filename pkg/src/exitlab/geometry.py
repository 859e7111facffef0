"""Domains and boundary bookkeeping shared by the flow, SDE, and exit code.

Supported domain kinds:

* ``box``      axis-aligned box.  Face ids: ``2*k`` is the low face of
               coordinate ``k`` (``x_k = lo_k``), ``2*k + 1`` the high face.
* ``ball``     Euclidean ball, single face id ``0``.
* ``implicit`` level set ``{g < 0}``, single face id ``0``.
* ``polygon``  planar polygon with counterclockwise vertices; face id ``i``
               is the edge from vertex ``i`` to vertex ``i+1``.

Corner policy: when a segment crosses two faces at the same parameter the
first face in id order wins (affects only a measure-zero set of segments).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

INTERIOR_MARGIN = 1e-12
_CROSS_TOL = 1e-10


@dataclass(frozen=True)
class Crossing:
    point: np.ndarray
    face_id: int
    normal: np.ndarray
    s: float  # segment parameter in [0, 1]


@dataclass(frozen=True)
class DomainSpec:
    """Immutable domain description with an outward-normal evaluator."""

    kind: str
    dim: int
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    func: Callable[[np.ndarray], float] | None = None
    vertices: np.ndarray | None = None
    name: str = ""
    _edge_normals: np.ndarray | None = field(default=None, repr=False)

    # -- constructors -------------------------------------------------

    @staticmethod
    def box(lo, hi, name: str = "") -> "DomainSpec":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box interior is empty")
        return DomainSpec(kind="box", dim=lo.size, lo=lo, hi=hi, name=name)

    @staticmethod
    def interval(a: float, b: float, name: str = "") -> "DomainSpec":
        return DomainSpec.box([a], [b], name=name)

    @staticmethod
    def square(half_width: float, center=(0.0, 0.0), name: str = "") -> "DomainSpec":
        c = np.asarray(center, dtype=float)
        return DomainSpec.box(c - half_width, c + half_width, name=name)

    @staticmethod
    def ball(center, radius: float, name: str = "") -> "DomainSpec":
        center = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise ValueError("ball interior is empty")
        return DomainSpec(kind="ball", dim=center.size, center=center,
                          radius=float(radius), name=name)

    @staticmethod
    def implicit(func, dim: int, name: str = "") -> "DomainSpec":
        return DomainSpec(kind="implicit", dim=dim, func=func, name=name)

    @staticmethod
    def polygon(vertices, name: str = "") -> "DomainSpec":
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ValueError("polygon needs an (n, 2) vertex array, n >= 3")
        # shoelace sign check: vertices must wind counterclockwise
        area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area2 <= 0:
            raise ValueError("polygon vertices must be counterclockwise")
        edges = np.roll(v, -1, axis=0) - v
        normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        return DomainSpec(kind="polygon", dim=2, vertices=v, name=name,
                          _edge_normals=normals)

    # -- queries ------------------------------------------------------

    @property
    def n_faces(self) -> int:
        if self.kind == "box":
            return 2 * self.dim
        if self.kind == "polygon":
            return len(self.vertices)
        return 1

    def signed_distance(self, x: np.ndarray) -> float:
        """Negative inside, positive outside (exact for box/ball, g for implicit)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "box":
            return float(np.max(np.maximum(self.lo - x, x - self.hi)))
        if self.kind == "ball":
            return float(np.linalg.norm(x - self.center) - self.radius)
        if self.kind == "implicit":
            return float(self.func(x))
        if self.kind == "polygon":
            return float(np.max([(x - self.vertices[i]) @ self._edge_normals[i]
                                 for i in range(len(self.vertices))]))
        raise ValueError(self.kind)


def contains(domain: DomainSpec, x, margin: float = INTERIOR_MARGIN) -> bool:
    """Strict interior test with an absolute margin."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if domain.kind == "box":
        return bool(np.all(x > domain.lo + margin) and np.all(x < domain.hi - margin))
    if domain.kind == "ball":
        return bool(np.linalg.norm(x - domain.center) < domain.radius - margin)
    if domain.kind == "implicit":
        return bool(domain.func(x) < -margin)
    if domain.kind == "polygon":
        v, nrm = domain.vertices, domain._edge_normals
        return bool(np.all([(x - v[i]) @ nrm[i] < -margin for i in range(len(v))]))
    raise ValueError(domain.kind)


def contains_many(domain: DomainSpec, X: np.ndarray,
                  margin: float = INTERIOR_MARGIN) -> np.ndarray:
    """Vectorized interior test over rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if domain.kind == "box":
        return np.all((X > domain.lo + margin) & (X < domain.hi - margin), axis=-1)
    if domain.kind == "ball":
        return np.linalg.norm(X - domain.center, axis=-1) < domain.radius - margin
    if domain.kind == "polygon":
        v, nrm = domain.vertices, domain._edge_normals
        side = np.stack([(X - v[i]) @ nrm[i] for i in range(len(v))], axis=-1)
        return np.all(side < -margin, axis=-1)
    if domain.kind == "implicit":
        return np.array([contains(domain, x, margin) for x in X])
    raise ValueError(domain.kind)


def outward_normal(domain: DomainSpec, point, face_id: int = 0) -> np.ndarray:
    point = np.atleast_1d(np.asarray(point, dtype=float))
    if domain.kind == "box":
        k, high = divmod(face_id, 2)[0], face_id % 2
        n = np.zeros(domain.dim)
        n[k] = 1.0 if high else -1.0
        return n
    if domain.kind == "ball":
        d = point - domain.center
        return d / np.linalg.norm(d)
    if domain.kind == "implicit":
        # central-difference gradient of the level function
        h = 1e-7 * (1.0 + np.linalg.norm(point))
        g = np.zeros(domain.dim)
        for k in range(domain.dim):
            e = np.zeros(domain.dim)
            e[k] = h
            g[k] = (domain.func(point + e) - domain.func(point - e)) / (2 * h)
        return g / np.linalg.norm(g)
    if domain.kind == "polygon":
        return domain._edge_normals[face_id].copy()
    raise ValueError(domain.kind)


def boundary_cross(domain: DomainSpec, x_in, x_out) -> Crossing:
    """Locate the first boundary crossing of the segment ``x_in -> x_out``.

    ``x_in`` must be inside and ``x_out`` outside.  Box/polygon faces are
    solved parametrically (exact); ball and implicit boundaries by
    bisection to 1e-10.  Ties between faces break toward the lowest id.
    """
    x_in = np.atleast_1d(np.asarray(x_in, dtype=float))
    x_out = np.atleast_1d(np.asarray(x_out, dtype=float))
    if not contains(domain, x_in, margin=0.0):
        raise ValueError("x_in is not inside the domain")
    if contains(domain, x_out, margin=0.0):
        raise ValueError("x_out is not outside the domain")

    if domain.kind == "box":
        return _cross_box(domain, x_in, x_out)
    if domain.kind == "polygon":
        return _cross_polygon(domain, x_in, x_out)
    return _cross_bisect(domain, x_in, x_out)


def _cross_box(domain: DomainSpec, x_in: np.ndarray, x_out: np.ndarray) -> Crossing:
    u = x_out - x_in
    best_s, best_face = np.inf, -1
    for k in range(domain.dim):
        if u[k] == 0.0:
            continue
        for face_id, bound in ((2 * k, domain.lo[k]), (2 * k + 1, domain.hi[k])):
            s = (bound - x_in[k]) / u[k]
            if not (0.0 <= s <= 1.0):
                continue
            p = x_in + s * u
            others = [j for j in range(domain.dim) if j != k]
            if all(domain.lo[j] - _CROSS_TOL <= p[j] <= domain.hi[j] + _CROSS_TOL
                   for j in others):
                if s < best_s - 1e-15 or (abs(s - best_s) <= 1e-15 and face_id < best_face):
                    best_s, best_face = s, face_id
    if best_face < 0:
        raise ValueError("segment does not cross the box boundary")
    point = x_in + best_s * u
    k, high = divmod(best_face, 2)
    point[k] = domain.hi[k] if high else domain.lo[k]  # pin onto the face exactly
    return Crossing(point=point, face_id=best_face,
                    normal=outward_normal(domain, point, best_face), s=float(best_s))


def _cross_polygon(domain: DomainSpec, x_in: np.ndarray, x_out: np.ndarray) -> Crossing:
    v = domain.vertices
    u = x_out - x_in
    best_s, best_face, best_point = np.inf, -1, None
    for i in range(len(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        e = b - a
        denom = u[0] * e[1] - u[1] * e[0]
        if denom == 0.0:
            continue
        w = a - x_in
        s = (w[0] * e[1] - w[1] * e[0]) / denom
        t = (u[0] * w[1] - u[1] * w[0]) / (-denom)
        if -1e-12 <= s <= 1.0 + 1e-12 and -1e-10 <= t <= 1.0 + 1e-10:
            if s < best_s - 1e-15 or (abs(s - best_s) <= 1e-15 and i < best_face):
                best_s, best_face, best_point = s, i, x_in + s * u
    if best_face < 0:
        raise ValueError("segment does not cross the polygon boundary")
    return Crossing(point=best_point, face_id=best_face,
                    normal=domain._edge_normals[best_face].copy(), s=float(best_s))


def _cross_bisect(domain: DomainSpec, x_in: np.ndarray, x_out: np.ndarray) -> Crossing:
    def f(s: float) -> float:
        return domain.signed_distance(x_in + s * (x_out - x_in))

    lo_s, hi_s = 0.0, 1.0
    # 1e-10 in the segment parameter, then pin ball crossings radially
    while hi_s - lo_s > 1e-12:
        mid = 0.5 * (lo_s + hi_s)
        if f(mid) < 0.0:
            lo_s = mid
        else:
            hi_s = mid
    s = hi_s
    point = x_in + s * (x_out - x_in)
    if domain.kind == "ball":
        d = point - domain.center
        point = domain.center + d * (domain.radius / np.linalg.norm(d))
    return Crossing(point=point, face_id=0,
                    normal=outward_normal(domain, point, 0), s=float(s))
