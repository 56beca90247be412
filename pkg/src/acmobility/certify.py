"""Conditional stability certificate and the generalized Gronwall inequality."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import EstimatorReport, IntervalContext
from .fem import Rule, triangle_rule
from .model import ModelConstants, Potential, quartic_potential

__all__ = [
    "GronwallProblem",
    "GronwallResult",
    "gronwall_bound",
    "Certificate",
    "assemble_certificate",
    "constant_mobility_certificate",
    "f_second_difference_bound",
    "initial_relative_terms",
    "BETA1",
    "BETA2_2D",
]

BETA1 = 0.5
BETA2_2D = 0.9


@dataclass
class GronwallProblem:
    """Data of the generalized Gronwall inequality.

    ``alpha`` holds piecewise-constant values on the cells of ``grid`` (length
    ``len(grid) - 1``) or node samples of a piecewise-linear function
    (length ``len(grid)``). Without ``grid`` a uniform grid on ``[0, T]`` is used.
    """

    T: float
    alpha: np.ndarray
    A: float
    B1: float = 0.0
    B2: float = 0.0
    beta1: float = BETA1
    beta2: float = BETA2_2D
    grid: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("alpha samples must be finite")
        if np.any(self.alpha < 0):
            raise ValueError("alpha must be nonnegative")
        for name in ("T", "A", "B1", "B2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("beta1, beta2 must be positive")

    def integral_alpha(self):
        a = self.alpha
        grid = self.grid
        if grid is None:
            m = len(a) if len(a) > 1 else 1
            grid = np.linspace(0.0, self.T, m + 1) if len(a) != 1 else np.array([0.0, self.T])
        grid = np.asarray(grid, dtype=float)
        dt = np.diff(grid)
        if len(a) == len(dt):
            return float(np.dot(a, dt))
        if len(a) == len(grid):
            return float(np.dot(0.5 * (a[1:] + a[:-1]), dt))
        if len(a) == 1:
            return float(a[0] * (grid[-1] - grid[0]))
        raise ValueError("alpha length matches neither cells nor nodes of the grid")


@dataclass
class GronwallResult:
    M: float
    condition: float
    satisfied: bool
    bound: float | None


def _condition(T, A, M, B1, B2, beta1, beta2):
    x = 8.0 * A * M
    return 8.0 * (1.0 + T) * (B1 * x**beta1 + B2 * x**beta2)


def gronwall_bound(problem: GronwallProblem) -> GronwallResult:
    """``2 A M`` bounds ``sup g1 + int g2`` when the smallness condition holds."""
    M = math.exp(problem.integral_alpha())
    cond = _condition(problem.T, problem.A, M, problem.B1, problem.B2, problem.beta1, problem.beta2)
    ok = cond <= 1.0
    return GronwallResult(M, cond, ok, 2.0 * problem.A * M if ok else None)


# -- initial terms -----------------------------------------------------------------


def _composite_rule(levels=1):
    """Degree-9 rule repeated on the red subdivision of the reference triangle."""
    base = triangle_rule()
    tris = [np.eye(3)]
    for _ in range(levels):
        new = []
        for v in tris:
            m01, m12, m20 = (v[0] + v[1]) / 2, (v[1] + v[2]) / 2, (v[2] + v[0]) / 2
            new += [np.array([v[0], m01, m20]), np.array([m01, v[1], m12]),
                    np.array([m20, m12, v[2]]), np.array([m01, m12, m20])]
        tris = new
    bary = np.vstack([base.bary @ t for t in tris])
    w = np.concatenate([base.weights / len(tris)] * len(tris))
    return Rule(bary, w, base.degree)


def initial_relative_terms(traj, constants: ModelConstants, potential: Potential | None = None,
                           phi0=None, ctx: IntervalContext | None = None, fd_step=1e-6):
    """Upper bounds for ``G(phi|phi_hat)(0)`` and ``E(phi|phi_hat)(0)``.

    ``phi - phi_hat = (phi0 - phi_h^0) + (phi_h^0 - phi_hat)``: the second part
    is bounded by ``H0``/``H1`` at ``t = 0``, the first is computed from the
    exact ``phi0(x, y)`` on a subdivided quadrature (skipped when ``phi0`` is
    None, i.e. the discrete datum is taken as exact). Then
    ``G <= |e|_0^2 / (2 b1)`` and
    ``E <= |grad e|_0^2 / 2 + max|f''| |e|_0^2 / (2 gamma)``.
    """
    potential = potential or quartic_potential()
    ctx = ctx or IntervalContext(traj, constants, potential)
    space, gamma = traj.space, traj.gamma
    s0 = ctx._at(ctx.node(0), ctx.node(1), 0.0) if traj.n_steps else None
    H0, H1 = (s0["H0"], s0["H1"]) if s0 else (0.0, 0.0)
    linf = s0["linf"] if s0 else float(np.max(np.abs(traj.phi[0])))
    proj0 = proj1 = 0.0
    phi0_inf = 0.0
    if phi0 is not None:
        rule = _composite_rule()
        x = space.points(rule)
        W = space.weights(rule)
        exact = phi0(x[..., 0], x[..., 1])
        h = fd_step
        gx = (phi0(x[..., 0] + h, x[..., 1]) - phi0(x[..., 0] - h, x[..., 1])) / (2 * h)
        gy = (phi0(x[..., 0], x[..., 1] + h) - phi0(x[..., 0], x[..., 1] - h)) / (2 * h)
        d = exact - space.eval(traj.phi[0], rule)
        dg = np.stack([gx, gy], axis=-1) - space.grad(traj.phi[0], rule)
        proj0 = float(np.sum(W * d * d))
        proj1 = float(np.sum(W * np.sum(dg * dg, axis=-1)))
        phi0_inf = float(np.max(np.abs(exact)))
    e0 = 2.0 * (proj0 + H0) if phi0 is not None else H0
    e1 = 2.0 * (proj1 + H1) if phi0 is not None else H1
    R = max(linf, phi0_inf)
    f2max = constants.growth_const[2] + constants.growth_coef[2] * R**2
    G = e0 / (2.0 * constants.b1)
    E = 0.5 * e1 + f2max * e0 / (2.0 * gamma)
    return {"G": G, "E": E, "projection_l2_sq": proj0, "projection_h1_sq": proj1, "H0": H0, "H1": H1}


# -- certificate -------------------------------------------------------------------


def f_second_difference_bound(report_or_interval, gamma=None):
    """Time integral of ``C_i^2/gamma^2 |f''(phi_hat) - f''(phi_h)|_0^4`` (already on the interval records)."""
    if hasattr(report_or_interval, "intervals"):
        return float(sum(iv.fdiff for iv in report_or_interval.intervals))
    return float(report_or_interval.fdiff)


@dataclass
class Certificate:
    variant: str
    T: float
    gamma: float
    A: float
    M: float
    B1: float
    B2: float
    beta1: float
    beta2: float
    condition: float
    satisfied: bool
    bound: float | None
    A_components: dict
    alpha_components: dict
    alpha_intervals: list = field(default_factory=list)
    cumulative_exponent: np.ndarray | None = None
    flags: list = field(default_factory=list)
    caveat: str = ""

    def breakdown_ok(self, rtol=1e-12):
        a = sum(self.A_components.values())
        e = sum(self.alpha_components.values())
        return (abs(a - self.A) <= rtol * max(abs(self.A), 1e-300)
                and abs(e - math.log(self.M)) <= rtol * max(abs(math.log(self.M)), 1e-300))

    def report(self):
        lines = [
            f"certificate ({self.variant}): gamma = {self.gamma:.6g}, T = {self.T:.6g}",
            f"A = {self.A:.6e}",
        ]
        lines += [f"  A[{k}] = {v:.6e}" for k, v in self.A_components.items()]
        lines.append(f"int alpha = {math.log(self.M):.6e}  (M = {self.M:.6e})")
        lines += [f"  alpha[{k}] = {v:.6e}" for k, v in self.alpha_components.items()]
        lines += [f"B1 = {self.B1:.6e}", f"B2 = {self.B2:.6e}", f"beta1 = {self.beta1}, beta2 = {self.beta2}",
                  f"condition 8(1+T)(B1(8AM)^b1 + B2(8AM)^b2) = {self.condition:.6e}"
                  f" -> {'satisfied' if self.satisfied else 'VIOLATED'}"]
        lines.append(f"bound = {self.bound:.6e}" if self.bound is not None else "bound = n/a (condition violated)")
        lines += [f"flag: {f}" for f in self.flags]
        if self.caveat:
            lines.append(f"caveat: {self.caveat}")
        return "\n".join(lines) + "\n"


def _alpha_parts(iv, lam, constants: ModelConstants, gamma, tau, constant=False, alpha_plus=False):
    """Integrals over one interval of the additive parts of ``alpha``."""
    c = constants
    lam_l, lam_m, lam_r = lam
    mu = iv.mu_inf_mid
    parts = {
        "half": 0.5 * tau,
        "lambda": tau / 6.0 * (max(lam_l, 0) + 4 * max(lam_m, 0) + max(lam_r, 0)),
        "mobility": 0.0 if constant else tau * c.b3 / c.b1**2 * c.b2 * mu,
        "dt_phi_hat": tau * c.C1(iv.linf_mid) * gamma * iv.dt_phi_hat_inf,
        "mu_hat_sq": 0.0 if constant else tau * c.C4 * gamma**2 * mu**2,
    }
    if alpha_plus:
        rest = (parts["mobility"] + parts["dt_phi_hat"] + parts["mu_hat_sq"]) / tau + 0.5
        total = tau / 6.0 * (max(rest + lam_l, 0) + 4 * max(rest + lam_m, 0) + max(rest + lam_r, 0))
        # attribute the difference to the eigenvalue slot so the parts still sum up
        parts["lambda"] = total - (parts["half"] + parts["mobility"] + parts["dt_phi_hat"] + parts["mu_hat_sq"])
    return parts


def _check_inputs(traj, report, eigen):
    if report is None or eigen is None:
        raise ValueError("estimator report and eigenvalue series are required")
    N = traj.n_steps
    if len(report.intervals) != N or len(eigen["nodes"]) != N + 1 or len(eigen["mid"]) != N:
        raise ValueError("estimator/eigenvalue series do not match the trajectory length")


def _assemble(variant, traj, report: EstimatorReport, eigen, constants: ModelConstants, gamma, beta2,
              initial, alpha_plus):
    _check_inputs(traj, report, eigen)
    gamma = traj.gamma if gamma is None else gamma
    tau, T = traj.tau, traj.T
    c = constants
    constant = variant == "constant-mobility"
    init = initial or {"G": 0.0, "E": 0.0}
    ivs = report.intervals

    if constant:
        w_r1, C2, C3 = np.full(len(ivs), 2.0), 3.5, 4.0
    else:
        C2, C3 = c.C2, c.C3
        w_r1 = np.array([2.0 / c.b1**2 + 2.0 * c.b3**2 * c.C_i**2 / c.b1**4 * iv.grad_hat3_max**2 for iv in ivs])
    est = {k: np.array([getattr(iv, k) for iv in ivs]) for k in ("est1", "est2", "est3", "est4", "fdiff")}
    residual = {
        "r1_l2": C2 * gamma**2 * est["est1"],
        "r1_hm1": w_r1 * est["est2"],
        "r2_l2": C3 * est["est3"],
        "r2_hm1": 0.5 * est["est4"] / gamma**2,
        "f2_difference": est["fdiff"],
    }
    A_comp = {"G0": float(init["G"]), "gamma2_E0": gamma**2 * float(init["E"])}
    A_comp.update({k: float(np.sum(v)) for k, v in residual.items()})
    A = float(sum(A_comp.values()))

    lam = eigen["nodes"]
    mid = eigen["mid"]
    alpha_rows = [_alpha_parts(iv, (lam[n], mid[n], lam[n + 1]), c, gamma, tau, constant, alpha_plus)
                  for n, iv in enumerate(ivs)]
    keys = list(alpha_rows[0]) if alpha_rows else ["half", "lambda", "mobility", "dt_phi_hat", "mu_hat_sq"]
    alpha_comp = {k: float(sum(r[k] for r in alpha_rows)) for k in keys}
    per = np.array([sum(r.values()) for r in alpha_rows])
    cum = np.concatenate([[0.0], np.cumsum(per)])
    exponent = float(sum(alpha_comp.values()))
    M = math.exp(exponent)

    mu_sup = max((iv.mu_inf_max for iv in ivs), default=0.0)
    hat_sup = max((max(iv.linf_bound, iv.phi_inf_max) for iv in ivs), default=0.0)
    if constant:
        B1 = 0.0
        B2 = 32.0 * 2.0 ** (2 * beta2) * c.C_e**2 * c.C_i**2 / gamma**2 * (1.0 + hat_sup) ** (2 - 2 * beta2)
    else:
        B1 = 4.0 * max(8.0, 2.0 / c.b1) * c.C_i**1.5 * c.b3 * c.b2 / c.b1**2.5 * mu_sup
        B2 = (4.0 * max(8.0, 1.0 / c.b1) * (2.0 / c.b1) ** (2 * beta2) * c.C_e**2
              * (c.b3 * c.b2 / (gamma**2 * c.b1**2) + c.C_i**2 / gamma**2) * (1.0 + hat_sup) ** (2 - 2 * beta2))
    cond = _condition(T, A, M, B1, B2, BETA1, beta2)
    ok = cond <= 1.0
    # the final estimate carries the H^-1 residual of the second equation with weight 1
    final_sum = (A_comp["G0"] + A_comp["gamma2_E0"] + A_comp["r1_l2"] + A_comp["r1_hm1"] + A_comp["r2_l2"]
                 + 2.0 * A_comp["r2_hm1"] + A_comp["f2_difference"])
    bound = 8.0 * M * final_sum if ok else None

    flags = [f"{k} = {getattr(c, k)} ({c.provenance.get(k, 'default')})" for k in ("C_i", "C_e")]
    h_max = report.h_max
    caveat = (f"discrete eigenvalue used in place of the continuous one; gap ~ h^2/gamma^2 = "
              f"{h_max**2 / gamma**2:.3e} not included")
    intervals = [dict(n=n, t=n * tau, **r, cumulative=cum[n + 1]) for n, r in enumerate(alpha_rows)]
    return Certificate(variant, T, gamma, A, M, B1, B2, BETA1, beta2, cond, ok, bound, A_comp, alpha_comp,
                       intervals, cum, flags, caveat)


def assemble_certificate(traj, report: EstimatorReport, eigen, constants: ModelConstants, gamma=None,
                         beta2=BETA2_2D, initial=None, alpha_plus=False) -> Certificate:
    """Conditional stability certificate for variable mobility.

    ``eigen`` is the dict of :func:`acmobility.eigen.integrated_positive_eigenvalue`;
    ``initial`` the dict of :func:`initial_relative_terms` (zero if omitted).
    ``alpha_plus`` integrates the positive part of the whole ``alpha`` instead
    of using ``lambda_+``.
    """
    return _assemble("general", traj, report, eigen, constants, gamma, beta2, initial, alpha_plus)


def constant_mobility_certificate(traj, report: EstimatorReport, eigen, constants: ModelConstants, gamma=None,
                                  beta2=BETA2_2D, initial=None, alpha_plus=False) -> Certificate:
    """Constant-mobility certificate with its literal constants (7/2, 2, 4, 1/2)."""
    if constants.b3 != 0.0 or constants.b1 != 1.0 or constants.b2 != 1.0:
        raise ValueError("the constant-mobility certificate requires b = 1")
    return _assemble("constant-mobility", traj, report, eigen, constants, gamma, beta2, initial, alpha_plus)
