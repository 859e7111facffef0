"""Planar heteroclinic networks: admissible itineraries, the two-node
case table, and Monte Carlo composition of random Poincare maps.

The composition engine pushes an empirical entrance distribution through
a chain of sub-domains.  In ``hybrid`` mode (default) each saddle
passage is simulated as an SDE exit problem from a rectangle around the
saddle, and the travel between saddles uses the far-field transport law
(linearized flow plus the orbit-grid Gaussian when the correction scale
is ``eps^1``), mirroring the iteration that produces the limit
frequencies.  ``raw`` mode simulates straight through user-supplied
sub-domains instead and serves as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Callable

import numpy as np

from .dynamics import VectorFieldSpec, deterministic_exit_time
from .fields import two_node_field
from .geometry import DomainSpec, contains_many
from .levinson import far_field_transport
from .rng import MASK64, normalize_seed
from .saddle import beta_exponent
from .sde import InitialLaw, SdeSystem, simulate_exit_batch


class ChainMismatchError(RuntimeError):
    """More than the tolerated fraction of paths left the staged chain."""


# ----------------------------------------------------------------------
# Network data model
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SaddleNode:
    position: np.ndarray
    lp: float
    lm: float
    unstable_axis: int  # coordinate axis of the local unstable direction
    sign_prob_plus: Fraction = Fraction(1, 2)

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float))
        if self.lp <= 0 or self.lm <= 0:
            raise ValueError("saddle rates must be positive")


@dataclass(frozen=True)
class HeteroNetwork:
    """Saddles, routing edges, and the enclosing domain.

    ``edges`` maps ``(saddle index, sign)`` to ``("saddle", j)`` or
    ``("exit", label)``; every pair must be routed exactly once.
    ``labels`` holds the boundary positions of exit labels.
    """

    saddles: tuple
    edges: dict
    domain: DomainSpec
    labels: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        for k in range(len(self.saddles)):
            for s in (+1, -1):
                if (k, s) not in self.edges:
                    raise ValueError(f"edge ({k}, {s:+d}) is not routed")
        for (k, s), dest in self.edges.items():
            kind, payload = dest
            if kind == "saddle" and not 0 <= payload < len(self.saddles):
                raise ValueError(f"edge ({k}, {s:+d}) points at missing saddle")
            if kind not in ("saddle", "exit"):
                raise ValueError(f"edge target kind {kind!r}")


# ----------------------------------------------------------------------
# Admissible sequences
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class AdmissibleSequence:
    """An itinerary of (saddle, sign) choices with per-step probabilities."""

    steps: tuple          # ((saddle index, sign), ...)
    probs: tuple          # per-step Fractions or floats
    terminal: str | None  # boundary label when the itinerary exits

    @property
    def pi(self):
        out = Fraction(1, 1)
        for p in self.probs:
            out = out * p
        return out

    def extends(self, other: "AdmissibleSequence") -> bool:
        n = len(other.steps)
        return len(self.steps) >= n and self.steps[:n] == other.steps

    def comparable(self, other: "AdmissibleSequence") -> bool:
        return self.extends(other) or other.extends(self)


@dataclass
class AdmissibleTree:
    root_saddle: int
    nodes: list
    leaves: list

    def is_free(self, L) -> bool:
        L = list(L)
        return not any(a is not b and a.comparable(b) for a in L for b in L)

    def is_complete(self, L) -> bool:
        if not self.is_free(L):
            return False
        return all(any(node.comparable(chosen) for chosen in L)
                   for node in self.nodes if node.steps)

    @staticmethod
    def pi_total(L):
        out = Fraction(0, 1)
        for seq in L:
            out = out + seq.pi
        return out


def enumerate_admissible(net: HeteroNetwork, x0_saddle: int,
                         depth: int) -> AdmissibleTree:
    """Binary itinerary tree from ``x0_saddle``, cut at exits or ``depth``."""
    if depth < 1:
        raise ValueError("depth must be at least 1")
    nodes, leaves = [], []

    def expand(k, steps, probs, level):
        node = AdmissibleSequence(tuple(steps), tuple(probs), None)
        nodes.append(node)
        if level == depth:
            leaves.append(node)
            return
        for sign in (+1, -1):
            p = net.saddles[k].sign_prob_plus if sign > 0 else \
                Fraction(1, 1) - net.saddles[k].sign_prob_plus
            kind, payload = net.edges[(k, sign)]
            new_steps = steps + [(k, sign)]
            new_probs = probs + [p]
            if kind == "exit":
                leaf = AdmissibleSequence(tuple(new_steps), tuple(new_probs),
                                          payload)
                nodes.append(leaf)
                leaves.append(leaf)
            else:
                expand(payload, new_steps, new_probs, level + 1)

    expand(x0_saddle, [], [], 0)
    return AdmissibleTree(root_saddle=x0_saddle, nodes=nodes, leaves=leaves)


# ----------------------------------------------------------------------
# Two-node case table
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CaseReport:
    """Classification of the two-node network by its four rates.

    ``p`` holds the three limiting exit weights (None where the value is
    not closed-form and must be estimated by Monte Carlo).  ``alpha0``
    maps the terminal branch (1 for the first-saddle exit, 2 or 3 for
    the second) to the correction exponent.  ``symmetry`` describes the
    correction law per branch.
    """

    case_id: int | None
    condition: str
    symmetry: dict
    p: tuple
    p_note: str
    alpha0_branch1: float
    alpha0_branch23: float
    flags: tuple = ()

    @property
    def classified(self) -> bool:
        return self.case_id is not None

    def alpha0(self, theta0: int) -> float:
        return self.alpha0_branch1 if theta0 == 1 else self.alpha0_branch23


_INCONSISTENT_NOTE = ("printed sub-cases mix 'strongly asymmetric if lp < lm' "
                      "with the hypothesis lp >= lm; values reproduced as "
                      "printed, not repaired")


def classify_two_node(lp: float, lm: float, mup: float, mum: float) -> CaseReport:
    """The printed two-node case table; equality cases take precedence."""
    for r in (lp, lm, mup, mum):
        if r <= 0:
            raise ValueError("all rates must be positive")
    half = Fraction(1, 2)
    quarter = Fraction(1, 4)

    if mup == mum and lp == lm:
        return CaseReport(4, "mup = mum and lp = lm",
                          {1: "asymmetric", 2: "asymmetric", 3: "asymmetric"},
                          (half, None, None),
                          "p2 in (0, p3), p3 < 1/2; Monte Carlo only",
                          1.0, 1.0)
    if mup > mum and lp == lm:
        return CaseReport(5, "mup > mum and lp = lm",
                          {1: "asymmetric", 2: "strongly_asymmetric",
                           3: "strongly_asymmetric"},
                          (half, None, None),
                          "p2 in (0, p3), p3 < 1/2; Monte Carlo only",
                          1.0, mum / mup)
    if mup == mum and lp > lm:
        return CaseReport(6, "mup = mum and lp > lm",
                          {1: "strongly_asymmetric", 2: "asymmetric",
                           3: "asymmetric"},
                          (half, Fraction(0, 1), half), "",
                          lm / lp, lm / lp)
    if mup < mum and lp < lm:
        return CaseReport(1, "mup < mum and lp < lm",
                          {1: "symmetric", 2: "symmetric", 3: "symmetric"},
                          (half, quarter, quarter), "",
                          1.0, 1.0)
    if mup * lp < mum * lm and lp >= lm:
        sym1 = "asymmetric" if lp == lm else "strongly_asymmetric"
        return CaseReport(2, "mup*lp < mum*lm and lp >= lm",
                          {1: sym1, 2: "symmetric", 3: "symmetric"},
                          (half, Fraction(0, 1), half), "",
                          lm / lp, 1.0,
                          flags=(_INCONSISTENT_NOTE,))
    if mup * lp > mum * lm and lp > lm:
        return CaseReport(3, "mup*lp > mum*lm and lp > lm",
                          {1: "strongly_asymmetric", 2: "strongly_asymmetric",
                           3: "strongly_asymmetric"},
                          (half, Fraction(0, 1), half), "",
                          lm / lp, (mum * lm) / (mup * lp))
    return CaseReport(None, "no printed case matches", {}, (None, None, None),
                      "unclassified", math.nan, math.nan)


# ----------------------------------------------------------------------
# The catalog two-node model
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class HybridStage:
    """One saddle passage: a rectangle with signed unstable exit faces."""

    saddle: int
    domain: DomainSpec
    face_signs: dict      # face id -> +-1
    connection_base: dict  # sign -> point on the unstable axis at the face
    entry_anchor: np.ndarray


@dataclass(frozen=True)
class TwoNodeModel:
    field: VectorFieldSpec
    net: HeteroNetwork
    stages: tuple
    x0: np.ndarray
    report: CaseReport


def two_node_model(lp: float, lm: float, mup: float, mum: float,
                   x0_height: float = 0.25) -> TwoNodeModel:
    """Catalog network: saddles at (0, 0) and (-1, 0) joined on the x axis.

    Exit labels: ``y1`` through the right domain face along the unstable
    axis of the first saddle, ``y2``/``y3`` through the top/bottom faces
    along the unstable axis of the second.
    """
    field = two_node_field(lp, lm, mup, mum)

    x_right = 0.6
    if mum > lp:  # spurious zero of the cubic factor on the positive axis
        x_right = min(x_right, 0.75 * lp / (mum - lp))
    x_left = -1.6
    if lp > mum:  # and on the far negative axis
        zero = -lp / (lp - mum)
        if zero > -2.0:
            x_left = max(x_left, 0.5 * (zero - 1.0))
    domain = DomainSpec.box([x_left, -0.8], [x_right, 0.8], name="two-node")

    saddles = (
        SaddleNode(position=(0.0, 0.0), lp=lp, lm=lm, unstable_axis=0),
        SaddleNode(position=(-1.0, 0.0), lp=mup, lm=mum, unstable_axis=1),
    )
    labels = {
        "y1": np.array([x_right, 0.0]),
        "y2": np.array([-1.0, 0.8]),
        "y3": np.array([-1.0, -0.8]),
    }
    edges = {
        (0, +1): ("exit", "y1"),
        (0, -1): ("saddle", 1),
        (1, +1): ("exit", "y2"),
        (1, -1): ("exit", "y3"),
    }
    net = HeteroNetwork(saddles=saddles, edges=edges, domain=domain,
                        labels=labels)

    d1 = 0.25
    stage1 = HybridStage(
        saddle=0,
        domain=DomainSpec.box([-d1, -0.45], [d1, max(0.45, x0_height + 0.15)]),
        face_signs={0: -1, 1: +1},
        connection_base={-1: np.array([-d1, 0.0]), +1: np.array([d1, 0.0])},
        entry_anchor=np.array([0.0, x0_height]),
    )
    d2 = 0.25
    stage2 = HybridStage(
        saddle=1,
        domain=DomainSpec.box([-1.0 - 0.45, -d2], [-1.0 + 0.45, d2]),
        face_signs={2: -1, 3: +1},
        connection_base={-1: np.array([-1.0, -d2]), +1: np.array([-1.0, d2])},
        entry_anchor=np.array([-1.0 + 0.25, 0.0]),
    )
    return TwoNodeModel(field=field, net=net, stages=(stage1, stage2),
                        x0=np.array([0.0, x0_height]),
                        report=classify_two_node(lp, lm, mup, mum))


# ----------------------------------------------------------------------
# Poincare-map composition
# ----------------------------------------------------------------------

@dataclass
class PoincareReport:
    terminal_counts: dict
    n_paths: int
    stray: int
    epsilon: float
    mode: str
    stage_histograms: list
    terminal_points: dict = dc_field(default_factory=dict)

    def frequency(self, label: str) -> float:
        return self.terminal_counts.get(label, 0) / self.n_paths

    @property
    def frequencies(self) -> dict:
        return {k: v / self.n_paths for k, v in sorted(self.terminal_counts.items())}


def _stage_seed(master: int, tag: int) -> int:
    return (normalize_seed(master) ^ ((tag + 1) * 0x9E3779B97F4A7C15)) & MASK64


def network_from_config(cfg: dict) -> HeteroNetwork:
    """Build a network from its JSON description.

    Expected shape::

        {"saddles": [{"position": [x, y], "lp": .., "lm": ..,
                      "unstable_axis": 0}, ...],
         "edges": [{"saddle": 0, "sign": 1, "kind": "exit", "to": "y1"},
                   {"saddle": 0, "sign": -1, "kind": "saddle", "to": 1}, ...],
         "domain": {"kind": "box", "lo": [..], "hi": [..]},
         "labels": {"y1": [x, y], ...}}
    """
    from .harness import domain_from_config

    saddles = tuple(SaddleNode(position=s["position"], lp=float(s["lp"]),
                               lm=float(s["lm"]),
                               unstable_axis=int(s["unstable_axis"]))
                    for s in cfg["saddles"])
    edges = {}
    for e in cfg["edges"]:
        dest = ("exit", e["to"]) if e["kind"] == "exit" \
            else ("saddle", int(e["to"]))
        edges[(int(e["saddle"]), int(e["sign"]))] = dest
    labels = {k: np.asarray(v, dtype=float)
              for k, v in cfg.get("labels", {}).items()}
    return HeteroNetwork(saddles=saddles, edges=edges,
                         domain=domain_from_config(cfg["domain"]),
                         labels=labels)


def subdomains_from_config(chain: list) -> list:
    """Chain description: a list of box blocks ``{"lo": [..], "hi": [..]}``."""
    return [DomainSpec.box(b["lo"], b["hi"]) for b in chain]


def _flow_time_to_plane(field, x, axis: int, value: float) -> tuple:
    """Travel time until coordinate ``axis`` reaches ``value``."""
    lo = [-1e6, -1e6]
    hi = [1e6, 1e6]
    if x[axis] < value:
        hi[axis] = value
    else:
        lo[axis] = value
    slab = DomainSpec.box(lo, hi)
    return deterministic_exit_time(field, slab, x)


def compose_poincare(model: TwoNodeModel, epsilon: float, paths: int,
                     seed: int, dt: float | None = None, mode: str = "hybrid",
                     subdomains: list | None = None, initial=None,
                     depth: int = 16, mismatch_tol: float = 0.01,
                     backend: str | None = None) -> PoincareReport:
    """Push the entrance law through the network, stage by stage.

    Returns terminal boundary-label frequencies and per-stage exit
    histograms.  Raises :class:`ChainMismatchError` when more than
    ``mismatch_tol`` of the paths leave the staged chain.
    """
    if paths < 1:
        raise ValueError("paths must be positive")
    if dt is None:
        dt = 1e-3
    x0 = np.atleast_1d(np.asarray(model.x0 if initial is None else initial,
                                  dtype=float))
    if mode == "raw":
        return _compose_raw(model, x0, epsilon, paths, seed, dt, subdomains,
                            mismatch_tol, backend)
    if mode != "hybrid":
        raise ValueError("mode must be 'hybrid' or 'raw'")

    net = model.net
    stage_by_saddle = {s.saddle: s for s in model.stages}
    terminal_counts: dict = {}
    terminal_points: dict = {}
    histograms = []
    stray = 0

    # cohorts: (saddle index, base point, correction scale exponent,
    #           per-path corrections)
    cohorts = [(0, x0, 1.0, np.zeros((paths, 2)))]
    tag = 0
    hops = 0
    while cohorts:
        hops += 1
        if hops > depth:
            raise ChainMismatchError("itinerary depth exceeded")
        k, base, alpha_exp, corr = cohorts.pop(0)
        stage = stage_by_saddle[k]
        points = base + epsilon ** alpha_exp * corr
        inside = contains_many(stage.domain, points)
        stray += int(np.sum(~inside))
        points = points[inside]
        if points.shape[0] == 0:
            continue
        tag += 1
        batch = _simulate_stage_points(model.field, stage.domain, points,
                                       epsilon, dt, _stage_seed(seed, tag),
                                       backend)
        exit_pts = batch.exit_points
        faces = batch.face_ids
        histograms.append({"saddle": k, "exit_points": exit_pts.copy(),
                           "faces": faces.copy()})
        for face, sign in stage.face_signs.items():
            rows = faces == face
            if not rows.any():
                continue
            pts = exit_pts[rows]
            kind, payload = net.edges[(k, sign)]
            if kind == "exit":
                terminal_counts[payload] = terminal_counts.get(payload, 0) \
                    + int(rows.sum())
                terminal_points.setdefault(payload, []).append(pts)
                continue
            # transport toward the next saddle along the connection
            next_stage = stage_by_saddle[payload]
            base_pt = stage.connection_base[sign]
            node = net.saddles[k]
            beta = beta_exponent(alpha_exp, node.lp, node.lm)
            xi = (pts - base_pt) / epsilon ** beta
            anchor_axis = 1 - net.saddles[payload].unstable_axis
            T, base_next = _flow_time_to_plane(
                model.field, base_pt, anchor_axis,
                next_stage.entry_anchor[anchor_axis])
            tag += 1
            bar_xi = far_field_transport(model.field, base_pt, T, xi,
                                         alpha=beta,
                                         seed=_stage_seed(seed, tag))
            cohorts.append((payload, base_next, beta, bar_xi))
        # non-designated faces are strays
        designated = np.isin(faces, list(stage.face_signs))
        stray += int(np.sum(~designated))

    if stray > mismatch_tol * paths:
        raise ChainMismatchError(
            f"{stray} of {paths} paths left the staged chain")
    return PoincareReport(terminal_counts=terminal_counts,
                          n_paths=paths, stray=stray,
                          epsilon=epsilon, mode="hybrid",
                          stage_histograms=histograms,
                          terminal_points={k: np.vstack(v)
                                           for k, v in terminal_points.items()})


def _simulate_stage_points(field, stage_domain, points, epsilon, dt, seed,
                           backend):
    law = InitialLaw(x0=np.zeros(points.shape[1]))
    system = SdeSystem(field=field, sigma=np.eye(points.shape[1]), initial=law)
    return simulate_exit_batch(system, stage_domain, epsilon, dt, seed,
                               points.shape[0], start_points=points,
                               backend=backend)


def _compose_raw(model: TwoNodeModel, x0, epsilon, paths, seed, dt,
                 subdomains, mismatch_tol, backend):
    """Chain raw exits through covering sub-domains; no transport laws."""
    net = model.net
    if subdomains is None:
        raise ValueError("raw mode needs an ordered list of sub-domains")
    points = np.tile(x0, (paths, 1))
    terminal_counts: dict = {}
    terminal_points: dict = {}
    histograms = []
    stray = 0
    for i, sub in enumerate(subdomains):
        if points.shape[0] == 0:
            break
        inside = contains_many(sub, points)
        stray += int(np.sum(~inside))
        points = points[inside]
        if points.shape[0] == 0:
            break
        batch = _simulate_stage_points(model.field, sub, points, epsilon, dt,
                                       _stage_seed(seed, 1000 + i), backend)
        exit_pts = batch.exit_points
        histograms.append({"subdomain": i, "exit_points": exit_pts.copy(),
                           "faces": batch.face_ids.copy()})
        # terminal = exit point on the outer boundary
        dist = np.array([net.domain.signed_distance(p) for p in exit_pts])
        terminal = np.abs(dist) <= 1e-6
        for p in exit_pts[terminal]:
            label = min(net.labels,
                        key=lambda L: float(np.linalg.norm(p - net.labels[L])))
            terminal_counts[label] = terminal_counts.get(label, 0) + 1
            terminal_points.setdefault(label, []).append(p)
        points = exit_pts[~terminal]
    stray += points.shape[0]
    if stray > mismatch_tol * paths:
        raise ChainMismatchError(f"{stray} of {paths} paths left the chain")
    return PoincareReport(terminal_counts=terminal_counts, n_paths=paths,
                          stray=stray, epsilon=epsilon, mode="raw",
                          stage_histograms=histograms,
                          terminal_points={k: np.vstack(v)
                                           for k, v in terminal_points.items()})
