"""Double-well potential, mobility, mobility entropy and relative functionals."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad_vec
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import minimize_scalar

from .fem import FEFunction, FESpace

__all__ = [
    "DomainError",
    "ModelAssumptionError",
    "Potential",
    "quartic_potential",
    "quadratic_potential",
    "Mobility",
    "default_mobility",
    "constant_mobility",
    "Entropy",
    "ModelConstants",
    "derive_bound_constants",
    "relative_energy",
    "bregman_G",
    "relative_dissipation",
    "free_energy",
]

VALIDATION_RANGE = 1.5


class DomainError(ValueError):
    """A field value left the tabulated/validated range."""


class ModelAssumptionError(ValueError):
    """Mobility or potential violates the structural assumptions."""


@dataclass(frozen=True)
class Potential:
    """Energy density ``f`` with derivatives and growth constants.

    ``growth_const[k]`` and ``growth_coef[k]`` satisfy
    ``|f^(k)(s)| <= growth_const[k] + growth_coef[k] |s|^(4-k)``; ``f1`` bounds
    ``f`` and ``f''`` from below by ``-f1``.
    """

    name: str
    f: Callable
    df: Callable
    d2f: Callable
    d3f: Callable
    d4f: Callable
    f1: float
    growth_const: tuple
    growth_coef: tuple
    d2f_lipschitz: Callable | None = None

    def derivative(self, k):
        return (self.f, self.df, self.d2f, self.d3f, self.d4f)[k]

    def relative(self, u, v):
        """Bregman remainder ``f(u) - f(v) - f'(v)(u - v)``."""
        return self.f(u) - self.f(v) - self.df(v) * (u - v)

    def second_derivative_lipschitz(self, ra, rb):
        """``L`` with ``|f''(a) - f''(b)| <= L |a - b|`` for ``|a| <= ra, |b| <= rb``."""
        if self.d2f_lipschitz is not None:
            return float(self.d2f_lipschitz(ra, rb))
        return self.growth_const[3] + self.growth_coef[3] * max(ra, rb)


def quartic_potential():
    """``f(s) = (s^2 - 1)^2 / 4`` with its analytic growth constants."""
    return Potential(
        name="quartic",
        f=lambda s: 0.25 * (s * s - 1.0) ** 2,
        df=lambda s: s * s * s - s,
        d2f=lambda s: 3.0 * s * s - 1.0,
        d3f=lambda s: 6.0 * s,
        d4f=lambda s: 6.0 + 0.0 * s,
        f1=1.0,
        # |s^3 - s| <= 2/(3 sqrt 3) + |s|^3;  |3s^2 - 1| <= 1 + 3 s^2
        growth_const=(0.25, 2.0 / (3.0 * np.sqrt(3.0)), 1.0, 0.0, 6.0),
        growth_coef=(0.25, 1.0, 3.0, 6.0, 0.0),
        # f''(a) - f''(b) = 3 (a + b)(a - b)
        d2f_lipschitz=lambda ra, rb: 3.0 * (ra + rb),
    )


def quadratic_potential():
    """``f(s) = s^2 / 2``: linear ``f'``, used to reduce the scheme to a linear one."""
    return Potential(
        name="quadratic",
        f=lambda s: 0.5 * s * s,
        df=lambda s: 1.0 * s,
        d2f=lambda s: 1.0 + 0.0 * s,
        d3f=lambda s: 0.0 * s,
        d4f=lambda s: 0.0 * s,
        f1=0.0,
        # s^2/2 <= 1/4 + s^4/4;  |s| <= 1 + |s|^3
        growth_const=(0.25, 1.0, 1.0, 0.0, 0.0),
        growth_coef=(0.25, 1.0, 0.0, 0.0, 0.0),
        d2f_lipschitz=lambda ra, rb: 0.0,
    )


@dataclass(frozen=True)
class Mobility:
    name: str
    b: Callable
    db: Callable
    d2b: Callable
    constant: bool = False


def default_mobility(c=0.1):
    """``b(s) = 1 + c (s^2 - 1)^2``."""
    return Mobility(
        name=f"quartic({c:g})",
        b=lambda s: 1.0 + c * (s * s - 1.0) ** 2,
        db=lambda s: 4.0 * c * s * (s * s - 1.0),
        d2b=lambda s: 4.0 * c * (3.0 * s * s - 1.0),
    )


def constant_mobility(value=1.0):
    return Mobility(
        name=f"constant({value:g})",
        b=lambda s: value + 0.0 * s,
        db=lambda s: 0.0 * s,
        d2b=lambda s: 0.0 * s,
        constant=True,
    )


class Entropy:
    """Convex ``G`` with ``G'' = 1/b``, ``G(0) = G'(0) = 0``, tabulated on ``[-m, m]``.

    Both ``G`` and ``G'`` are cubic Hermite interpolants whose nodal slopes are
    the exact derivatives ``G'`` and ``1/b``.
    """

    def __init__(self, mobility: Mobility, m=VALIDATION_RANGE, n_nodes=4097):
        if n_nodes % 2 == 0:
            n_nodes += 1
        self.mobility = mobility
        self.m = float(m)
        s = np.linspace(-self.m, self.m, n_nodes)
        s[n_nodes // 2] = 0.0
        h = s[1] - s[0]
        left = s[:-1]

        def integrand(theta):
            inv_b = 1.0 / mobility.b(left + h * theta)
            return np.concatenate([h * inv_b, h * h * (1.0 - theta) * inv_b])

        vals, _ = quad_vec(integrand, 0.0, 1.0, epsabs=1e-15, epsrel=1e-14)
        k = len(left)
        d1 = vals[:k]  # int_{s_k}^{s_k+1} 1/b
        d2 = vals[k:]  # int_{s_k}^{s_k+1} (s_{k+1} - u)/b(u) du
        mid = n_nodes // 2
        gp = np.zeros(n_nodes)
        gp[mid + 1:] = np.cumsum(d1[mid:])
        gp[:mid] = -np.cumsum(d1[:mid][::-1])[::-1]
        g = np.zeros(n_nodes)
        for i in range(mid, n_nodes - 1):
            g[i + 1] = g[i] + gp[i] * h + d2[i]
        for i in range(mid, 0, -1):
            # step leftwards: G(s_{i-1}) = G(s_i) - G'(s_i) h + int (u - s_{i-1})/b
            g[i - 1] = g[i] - gp[i] * h + (h * d1[i - 1] - d2[i - 1])
        self.nodes = s
        self._g = CubicHermiteSpline(s, g, gp)
        self._gp = CubicHermiteSpline(s, gp, 1.0 / mobility.b(s))

    def _check(self, s):
        s = np.asarray(s, dtype=float)
        if s.size and np.max(np.abs(s)) > self.m:
            worst = s.flat[np.argmax(np.abs(s))]
            raise DomainError(f"value {worst:.6g} outside entropy table range [-{self.m}, {self.m}]")
        return s

    def __call__(self, s):
        s = self._check(s)
        return self._g(s), self._gp(s)

    def value(self, s):
        return self._g(self._check(s))

    def derivative(self, s):
        return self._gp(self._check(s))

    def relative(self, u, v):
        """Pointwise Bregman distance ``G(u) - G(v) - G'(v)(u - v)``."""
        u = self._check(u)
        v = self._check(v)
        return self._g(u) - self._g(v) - self._gp(v) * (u - v)


def _sample_extrema(fn, lo, hi, n=10001, kind="max"):
    s = np.linspace(lo, hi, n)
    s = np.union1d(s, [0.0]) if lo < 0 < hi else s
    v = fn(s)
    i = int(np.argmax(v) if kind == "max" else np.argmin(v))
    best = float(v[i])
    a, b = s[max(i - 1, 0)], s[min(i + 1, len(s) - 1)]
    if b > a:
        sign = -1.0 if kind == "max" else 1.0
        res = minimize_scalar(lambda x: sign * fn(np.array(x)), bounds=(a, b), method="bounded",
                              options={"xatol": 1e-12})
        cand = float(fn(np.array(res.x)))
        best = max(best, cand) if kind == "max" else min(best, cand)
    return best


@dataclass(frozen=True)
class ModelConstants:
    b1: float
    b2: float
    b3: float
    b4: float
    f1: float
    growth_const: tuple
    growth_coef: tuple
    C_i: float = 1.0
    C_e: float = 1.0
    range: tuple = (-VALIDATION_RANGE, VALIDATION_RANGE)
    provenance: dict = field(default_factory=lambda: {"C_i": "default", "C_e": "default"})

    @property
    def C2(self):
        return 0.5 + 3.0 / self.b1

    @property
    def C3(self):
        return 1.0 + 3.0 * self.b2

    @property
    def C4(self):
        return self.b3 + 6.0 * self.b3**2 / self.b1**2

    def C1(self, linf_hat):
        """``f_2^(3) + f_3^(3) (1 + |phi_hat|_inf)``."""
        return self.growth_const[3] + self.growth_coef[3] * (1.0 + linf_hat)


def derive_bound_constants(mobility: Mobility, potential: Potential,
                           range=(-VALIDATION_RANGE, VALIDATION_RANGE), C_i=1.0, C_e=1.0,
                           provenance=None):
    """Mobility bounds by dense sampling on ``range``; potential constants from ``potential``."""
    lo, hi = map(float, range)
    if not hi > lo:
        raise ValueError(f"empty range {range!r}")
    b1 = _sample_extrema(mobility.b, lo, hi, kind="min")
    if b1 <= 0:
        raise ModelAssumptionError(f"mobility not positive on [{lo}, {hi}] (min {b1:.3g})")
    b2 = _sample_extrema(mobility.b, lo, hi, kind="max")
    b3 = _sample_extrema(lambda s: np.abs(mobility.db(s)), lo, hi, kind="max")
    b4 = _sample_extrema(lambda s: np.abs(mobility.d2b(s)), lo, hi, kind="max")
    if mobility.constant:
        b3 = b4 = 0.0
    prov = {"C_i": "default", "C_e": "default"}
    prov.update(provenance or {})
    return ModelConstants(
        b1=b1, b2=b2, b3=b3, b4=b4, f1=potential.f1,
        growth_const=tuple(potential.growth_const), growth_coef=tuple(potential.growth_coef),
        C_i=float(C_i), C_e=float(C_e), range=(lo, hi), provenance=prov,
    )


# -- relative functionals ------------------------------------------------------------


def _same_space(a: FEFunction, b: FEFunction):
    if a.space is not b.space:
        raise ValueError("functions live on different spaces")
    return a.space


def free_energy(space: FESpace, coeffs, gamma, potential: Potential):
    """``int |grad phi|^2 / 2 + f(phi) / gamma``."""
    w = space.weights()
    g = space.grad(coeffs)
    u = space.eval(coeffs)
    return float(np.sum(w * (0.5 * np.sum(g * g, axis=-1) + potential.f(u) / gamma)))


def relative_energy_values(space: FESpace, u, uhat, grad_diff, gamma, potential: Potential):
    """Relative energy from point values of both fields and of ``grad(u - uhat)``."""
    w = space.weights()
    dens = 0.5 * np.sum(grad_diff * grad_diff, axis=-1) + potential.relative(u, uhat) / gamma
    return float(np.sum(w * dens))


def relative_energy(phi: FEFunction, phi_hat: FEFunction, gamma, potential: Potential):
    space = _same_space(phi, phi_hat)
    d = phi.coeffs - phi_hat.coeffs
    return relative_energy_values(space, phi.values(), phi_hat.values(), space.grad(d), gamma, potential)


def bregman_G(phi: FEFunction, phi_hat: FEFunction, entropy: Entropy):
    """``int G(phi | phi_hat)``, nonnegative by convexity."""
    space = _same_space(phi, phi_hat)
    dens = entropy.relative(phi.values(), phi_hat.values())
    return float(np.sum(space.weights() * dens))


def relative_dissipation(phi: FEFunction, mu: FEFunction, mu_hat: FEFunction, mobility: Mobility):
    """``|| b(phi)^{1/2} (mu - mu_hat) ||_0^2``."""
    space = _same_space(phi, mu)
    _same_space(mu, mu_hat)
    d = space.eval(mu.coeffs - mu_hat.coeffs)
    return float(np.sum(space.weights() * mobility.b(phi.values()) * d * d))
