"""Predicted limit laws for exit past a planar saddle.

For the saddle ``diag(lp, -lm)`` entered along the stable axis at height
``y2`` with initial-condition scale ``eps^alpha``, the laws of

* the unstable-direction seed  ``eta+ = chi_1 + 1{alpha=1} N+``,
* the transverse exit correction ``theta`` (three branches by the sign
  of ``alpha*lm - lp``),
* the exit-time shift  ``(1/lp) log(delta / |eta+|)``,
* and the joint (sign, spatial correction, time shift) vector

are built as sampleable objects with closed-form or quadrature-based
CDFs where available.  The Gaussian ``N+`` has variance

    integral_0^inf exp(-2*kappa*s) |sigma1(0, exp(-lm*s) y2)|^2 ds

with ``kappa`` defaulting to ``lp`` (configurable; the Monte Carlo
acceptance run on the saddle arbitrates the rate empirically), and the
sign-conditioned transverse Gaussian has variance

    sigma_pm = integral_{-inf}^0 exp(2*lm*s) |sigma2(pm delta e^{lp s}, 0)|^2 ds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np
from scipy import integrate, special

from .rng import single_generator

SQRT2 = math.sqrt(2.0)


class QuadratureError(RuntimeError):
    """Variance quadrature failed to converge."""


class ImproperLawError(ValueError):
    """The requested law would put positive mass on a singular point."""


def _norm_cdf(x):
    return 0.5 * (1.0 + special.erf(np.asarray(x, dtype=float) / SQRT2))


def _as_generator(seed_or_gen) -> np.random.Generator:
    if isinstance(seed_or_gen, np.random.Generator):
        return seed_or_gen
    return single_generator(seed_or_gen)


@dataclass
class LimitLaw:
    """A sampleable scalar limit law with an optional evaluable CDF."""

    kind: str
    sampler: Callable[[np.random.Generator, int], np.ndarray]
    cdf: Callable[[np.ndarray], np.ndarray] | None
    description: str
    params: dict = dc_field(default_factory=dict)

    def sample(self, seed_or_gen, n: int) -> np.ndarray:
        return self.sampler(_as_generator(seed_or_gen), int(n))

    def self_check(self, n: int = 100_000, level: float = 1e-3,
                   seed: int = 2024) -> float:
        """KS p-value of the sampler against the CDF (must exceed level)."""
        if self.cdf is None:
            raise ValueError("law has no evaluable cdf")
        from .harness import ks_test

        stat, p = ks_test(self.sample(seed, n), self.cdf)
        if p < level:
            raise AssertionError(
                f"law self-check failed: KS stat {stat:.4g}, p {p:.3g}")
        return p

    def to_json(self) -> str:
        import json

        return json.dumps({
            "kind": self.kind,
            "description": self.description,
            "params": {k: float(v) if isinstance(v, (int, float)) else v
                       for k, v in self.params.items()},
            "has_cdf": self.cdf is not None,
        }, indent=2)

    def samples_to_csv(self, path, seed, n: int) -> np.ndarray:
        s = self.sample(seed, n)
        with open(path, "w") as fh:
            fh.write("sample\n")
            for v in s:
                fh.write(f"{float(v)!r}\n")
        return s


# ----------------------------------------------------------------------
# Saddle description
# ----------------------------------------------------------------------

def _row_norm2(fn, y):
    row = np.atleast_1d(np.asarray(fn(y), dtype=float))
    return float(np.sum(row * row))


@dataclass(frozen=True)
class SaddleSpec:
    """Everything the saddle limit laws depend on.

    ``sigma1``/``sigma2`` are the rows of the conjugated diffusion as
    callables of the planar point (constants are promoted); ``chi``
    describes the law of the transformed initial perturbation
    ``chi0 = grad f(x) xi0`` as ``("point", vec)``, ``("gaussian", mean,
    cov)``, or a sampler callable.  ``kappa`` overrides the ``N+`` decay
    rate; None means ``lp``.
    """

    lp: float
    lm: float
    delta: float
    alpha: float
    y2: float
    sigma1: Callable | float = 1.0
    sigma2: Callable | float = 1.0
    chi: object = ("point", (0.0, 0.0))
    kappa: float | None = None

    def __post_init__(self):
        if self.lp <= 0 or self.lm <= 0:
            raise ValueError("rates must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.alpha != 1.0 and self._chi1_atom_at_zero():
            raise ValueError("alpha != 1 requires P{chi_1 = 0} = 0")

    def _chi1_atom_at_zero(self) -> bool:
        kind = self.chi[0] if isinstance(self.chi, tuple) else None
        if kind == "point":
            return float(self.chi[1][0]) == 0.0
        if kind == "gaussian":
            return float(self.chi[2][0][0]) == 0.0 and float(self.chi[1][0]) == 0.0
        return False

    def sigma1_fn(self):
        return self.sigma1 if callable(self.sigma1) else (
            lambda y, c=float(self.sigma1): np.array([c, 0.0]))

    def sigma2_fn(self):
        return self.sigma2 if callable(self.sigma2) else (
            lambda y, c=float(self.sigma2): np.array([0.0, c]))

    @property
    def kappa_rate(self) -> float:
        return self.lp if self.kappa is None else float(self.kappa)


def beta_exponent(alpha: float, lp: float, lm: float) -> float:
    """Scaling exponent of the transverse exit correction."""
    if not 0 < alpha <= 1 or lp <= 0 or lm <= 0:
        raise ValueError("need alpha in (0,1] and positive rates")
    if alpha * lm >= lp:
        return 1.0
    return alpha * lm / lp


def classify_symmetry(alpha: float, lp: float, lm: float) -> str:
    """symmetric / asymmetric / strongly_asymmetric by sign(alpha*lm - lp)."""
    if not 0 < alpha <= 1 or lp <= 0 or lm <= 0:
        raise ValueError("need alpha in (0,1] and positive rates")
    x = alpha * lm - lp
    if x > 0:
        return "symmetric"
    if x == 0:
        return "asymmetric"
    return "strongly_asymmetric"


# ----------------------------------------------------------------------
# Variance quadratures
# ----------------------------------------------------------------------

def _decaying_integral(m, rate: float, atol: float = 1e-10) -> float:
    """integral_0^inf exp(-2*rate*s) m(s) ds with a certified tail bound."""
    if rate <= 0:
        raise QuadratureError("decay rate must be positive")
    probe = np.linspace(0.0, 10.0 / rate, 64)
    M = max(m(s) for s in probe)
    if not np.isfinite(M):
        raise QuadratureError("integrand is not finite on the probe grid")
    M = max(M, atol)
    S = max(1.0, math.log(M / (2 * rate * atol)) / (2 * rate) + 1.0)
    val, err = integrate.quad(lambda s: math.exp(-2 * rate * s) * m(s),
                              0.0, S, epsabs=atol, epsrel=1e-12, limit=400)
    if not np.isfinite(val) or err > 100 * atol + 1e-8 * abs(val):
        raise QuadratureError(f"quadrature error estimate {err:.3g} too large")
    return float(val)


def nplus_variance(spec: SaddleSpec, atol: float = 1e-10) -> float:
    """Variance of N+ at rate ``spec.kappa_rate``."""
    s1 = spec.sigma1_fn()

    def m(s):
        return _row_norm2(s1, np.array([0.0, math.exp(-spec.lm * s) * spec.y2]))

    return _decaying_integral(m, spec.kappa_rate, atol)


def sigma_pm(spec: SaddleSpec, sign: int, atol: float = 1e-10) -> float:
    """Sign-conditioned variance of the transverse Gaussian N."""
    s2 = spec.sigma2_fn()

    def m(s):
        return _row_norm2(s2, np.array([sign * spec.delta * math.exp(-spec.lp * s),
                                        0.0]))

    return _decaying_integral(m, spec.lm, atol)


# ----------------------------------------------------------------------
# eta+ law
# ----------------------------------------------------------------------

def _chi1_normal_params(spec: SaddleSpec):
    """(mean, var) of chi_1 when it is point/Gaussian, else None."""
    if isinstance(spec.chi, tuple) and spec.chi[0] == "point":
        return float(spec.chi[1][0]), 0.0
    if isinstance(spec.chi, tuple) and spec.chi[0] == "gaussian":
        return float(spec.chi[1][0]), float(np.asarray(spec.chi[2])[0, 0])
    return None


def _chi_sampler(spec: SaddleSpec):
    if callable(spec.chi):
        return spec.chi
    kind = spec.chi[0]
    if kind == "point":
        vec = np.asarray(spec.chi[1], dtype=float)
        return lambda gen, n: np.tile(vec, (n, 1))
    if kind == "gaussian":
        mean = np.asarray(spec.chi[1], dtype=float)
        cov = np.asarray(spec.chi[2], dtype=float)
        L = np.linalg.cholesky(cov + 1e-300 * np.eye(2))
        return lambda gen, n: mean + gen.standard_normal((n, 2)) @ L.T
    raise ValueError(f"unrecognized chi description {spec.chi!r}")


def eta_plus_law(spec: SaddleSpec) -> LimitLaw:
    """Law of ``eta+ = chi_1 + 1{alpha=1} N+``."""
    v_plus = nplus_variance(spec) if spec.alpha == 1.0 else 0.0
    chi_draw = _chi_sampler(spec)
    sd = math.sqrt(v_plus)

    def sampler(gen, n):
        chi1 = chi_draw(gen, n)[:, 0]
        if v_plus > 0:
            chi1 = chi1 + sd * gen.standard_normal(n)
        return chi1

    normal = _chi1_normal_params(spec)
    cdf = None
    if normal is not None:
        mean, var = normal[0], normal[1] + v_plus
        if var > 0:
            s = math.sqrt(var)
            cdf = lambda t: _norm_cdf((np.asarray(t, dtype=float) - mean) / s)
            kind = "transformed-gaussian"
        else:
            cdf = lambda t: (np.asarray(t, dtype=float) >= mean).astype(float)
            kind = "point-mass-mixture"
        params = {"mean": mean, "var": var}
    else:
        kind = "composite"
        params = {"nplus_var": v_plus}
    return LimitLaw(kind=kind, sampler=sampler, cdf=cdf,
                    description="unstable-direction seed eta+",
                    params=params)


def _eta_zero_mass(law: LimitLaw) -> bool:
    if law.kind == "point-mass-mixture" and law.params.get("mean") == 0.0:
        return True
    return False


def _eta_sign_probs(spec: SaddleSpec, law: LimitLaw):
    if law.cdf is not None:
        q_minus = float(law.cdf(0.0))
        return 1.0 - q_minus, q_minus
    q_plus = float(np.mean(law.sample(7, 200_000) > 0))
    return q_plus, 1.0 - q_plus


# ----------------------------------------------------------------------
# theta law
# ----------------------------------------------------------------------

def theta_law(spec: SaddleSpec, eta_plus: LimitLaw | None = None) -> LimitLaw:
    """Transverse exit-correction law, three branches by sign(alpha*lm - lp)."""
    eta = eta_plus_law(spec) if eta_plus is None else eta_plus
    branch = classify_symmetry(spec.alpha, spec.lp, spec.lm)
    s_plus = math.sqrt(sigma_pm(spec, +1))
    s_minus = math.sqrt(sigma_pm(spec, -1))
    c = spec.lm / spec.lp
    y2, delta = spec.y2, spec.delta

    def draw_pair(gen, n):
        e = eta.sample(gen, n)
        sd = np.where(e > 0, s_plus, s_minus)
        N = sd * gen.standard_normal(n)
        return e, N

    if branch == "symmetric":
        def sampler(gen, n):
            _, N = draw_pair(gen, n)
            return N
    elif branch == "asymmetric":
        def sampler(gen, n):
            e, N = draw_pair(gen, n)
            return (np.abs(e) / delta) ** c * y2 + N
    else:
        def sampler(gen, n):
            e, _ = draw_pair(gen, n)
            return (np.abs(e) / delta) ** c * y2

    cdf = _theta_cdf(spec, eta, branch, s_plus, s_minus)
    return LimitLaw(kind="composite", sampler=sampler, cdf=cdf,
                    description=f"transverse exit correction ({branch})",
                    params={"branch": branch, "sigma_plus": s_plus ** 2,
                            "sigma_minus": s_minus ** 2, "bias_exponent": c})


def _abs_eta_cdf(eta: LimitLaw):
    if eta.cdf is None:
        return None

    def F(a):
        a = np.asarray(a, dtype=float)
        return np.where(a < 0, 0.0, eta.cdf(a) - eta.cdf(-a))

    return F


def _theta_cdf(spec: SaddleSpec, eta: LimitLaw, branch, s_plus, s_minus):
    c = spec.lm / spec.lp
    y2, delta = spec.y2, spec.delta
    q_plus, q_minus = _eta_sign_probs(spec, eta)

    if branch == "symmetric":
        def cdf(t):
            t = np.asarray(t, dtype=float)
            out = np.zeros_like(t, dtype=float)
            if s_plus > 0:
                out = out + q_plus * _norm_cdf(t / s_plus)
            else:
                out = out + q_plus * (t >= 0)
            if s_minus > 0:
                out = out + q_minus * _norm_cdf(t / s_minus)
            else:
                out = out + q_minus * (t >= 0)
            return out

        return cdf

    F_abs = _abs_eta_cdf(eta)
    if F_abs is None:
        return None

    if branch == "strongly_asymmetric":
        if y2 == 0.0:
            return lambda t: (np.asarray(t, dtype=float) >= 0).astype(float)

        def cdf(t):
            t = np.asarray(t, dtype=float)
            r = t / y2
            a = delta * np.where(r > 0, r, 0.0) ** (1.0 / c)
            inner = F_abs(a)
            if y2 > 0:
                return np.where(r <= 0, 0.0, inner)
            return np.where(r <= 0, 1.0, 1.0 - inner)

        return cdf

    # equal-rates branch: theta = (|eta|/delta)^c y2 + N, numeric mixture
    normal = eta.params if eta.kind in ("transformed-gaussian",
                                        "point-mass-mixture") else None
    if normal is None or "mean" not in normal:
        return None
    mean, var = normal["mean"], normal["var"]
    nodes, weights = np.polynomial.hermite_e.hermegauss(201)

    def cdf(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if var > 0:
            e_nodes = mean + math.sqrt(var) * nodes
            w = weights / math.sqrt(2 * math.pi)
        else:
            e_nodes = np.array([mean])
            w = np.array([1.0])
        bias = (np.abs(e_nodes) / delta) ** c * y2
        sd = np.where(e_nodes > 0, s_plus, s_minus)
        z = (t[:, None] - bias[None, :]) / np.where(sd > 0, sd, 1.0)[None, :]
        inner = np.where(sd[None, :] > 0, _norm_cdf(z),
                         (t[:, None] >= bias[None, :]).astype(float))
        out = inner @ w
        return out if out.size > 1 else float(out[0])

    return cdf


# ----------------------------------------------------------------------
# exit-time shift and the joint law
# ----------------------------------------------------------------------

def exit_time_shift_law(spec: SaddleSpec,
                        eta_plus: LimitLaw | None = None) -> LimitLaw:
    """Law of ``(1/lp) log(delta/|eta+|)``, the limit of
    ``tau + (alpha/lp) log(eps)``."""
    eta = eta_plus_law(spec) if eta_plus is None else eta_plus
    if _eta_zero_mass(eta):
        raise ImproperLawError("eta+ has an atom at 0; the time-shift law "
                               "would be improper")
    lp, delta = spec.lp, spec.delta

    def sampler(gen, n):
        e = eta.sample(gen, n)
        return np.log(delta / np.abs(e)) / lp

    F_abs = _abs_eta_cdf(eta)
    cdf = None
    if F_abs is not None:
        def cdf(t):
            t = np.asarray(t, dtype=float)
            a = delta * np.exp(-lp * t)
            return 1.0 - F_abs(a)

    return LimitLaw(kind="composite", sampler=sampler, cdf=cdf,
                    description="exit-time shift (1/lp) log(delta/|eta+|)",
                    params={"lp": lp, "delta": delta})


@dataclass
class FullExitLaw:
    """Joint limit of (exit sign, spatial correction, time shift).

    ``sample`` returns a dict with keys ``sign`` (+-1), ``theta``,
    ``spatial`` (n, 2), and ``time``.  The spatial correction is
    ``grad_g(sign * delta e1) @ (theta e2)``; the exit point at noise
    level eps is ``g(sign delta e1) + eps^beta * spatial``.
    """

    spec: SaddleSpec
    eta: LimitLaw
    grad_g: Callable | None = None

    def sample(self, seed_or_gen, n: int) -> dict:
        gen = _as_generator(seed_or_gen)
        spec = self.spec
        e = self.eta.sample(gen, n)
        sign = np.where(e > 0, 1.0, -1.0)
        time = np.log(spec.delta / np.abs(e)) / spec.lp
        s_plus = math.sqrt(sigma_pm(spec, +1))
        s_minus = math.sqrt(sigma_pm(spec, -1))
        branch = classify_symmetry(spec.alpha, spec.lp, spec.lm)
        c = spec.lm / spec.lp
        N = np.where(e > 0, s_plus, s_minus) * gen.standard_normal(n)
        bias = (np.abs(e) / spec.delta) ** c * spec.y2
        if branch == "symmetric":
            theta = N
        elif branch == "asymmetric":
            theta = bias + N
        else:
            theta = bias
        spatial = np.zeros((n, 2))
        if self.grad_g is None:
            spatial[:, 1] = theta
        else:
            for s in (+1.0, -1.0):
                rows = sign == s
                if not rows.any():
                    continue
                G = np.asarray(self.grad_g(np.array([s * spec.delta, 0.0])))
                spatial[rows] = np.outer(theta[rows], G[:, 1])
        return {"sign": sign, "theta": theta, "spatial": spatial, "time": time}

    def exit_points(self, sample: dict, eps: float, g: Callable | None = None):
        spec = self.spec
        beta = beta_exponent(spec.alpha, spec.lp, spec.lm)
        base = np.stack([np.array([s * spec.delta, 0.0]) if g is None
                         else np.asarray(g(np.array([s * spec.delta, 0.0])))
                         for s in sample["sign"]])
        return base + eps ** beta * sample["spatial"]


def full_exit_law(spec: SaddleSpec, eta_plus: LimitLaw | None = None,
                  grad_g: Callable | None = None) -> FullExitLaw:
    eta = eta_plus_law(spec) if eta_plus is None else eta_plus
    if _eta_zero_mass(eta):
        raise ImproperLawError("eta+ has an atom at 0")
    return FullExitLaw(spec=spec, eta=eta, grad_g=grad_g)


# ----------------------------------------------------------------------
# Closed-form references
# ----------------------------------------------------------------------

def day_density(x) -> np.ndarray:
    """Density ``(2/sqrt(pi)) exp(-(x + e^{-2x}))`` of the equal-rates
    exit-time correction started on the stable manifold."""
    x = np.asarray(x, dtype=float)
    return 2.0 / math.sqrt(math.pi) * np.exp(-(x + np.exp(-2.0 * x)))


def day_cdf(x) -> np.ndarray:
    """CDF of :func:`day_density`: ``2 (1 - Phi(sqrt(2) e^{-x}))``."""
    x = np.asarray(x, dtype=float)
    return 2.0 * (1.0 - _norm_cdf(SQRT2 * np.exp(-x)))


def linear_h_constants(lp: float, domain_half_width: float) -> tuple[float, float]:
    """The two exit-time atoms for the linear catalog saddle.

    For ``diag(lp, -lm)`` in a centered box of half-width ``Delta`` the
    travel-time constants degenerate to ``log(Delta)/lp`` on both sides;
    they vanish for ``Delta = 1``.
    """
    h = math.log(domain_half_width) / lp
    return h, h
