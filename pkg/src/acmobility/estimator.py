"""Residual indicators for the elliptic reconstruction and interval residual bounds.

The reconstruction data on an interval is
``g(t) = mu_{h,tau}(t) - I_1[f'(phi_{h,tau})](t) / gamma``, linear in time at
every point, so element residuals and gradient jumps are computed once per
time node and blended linearly in between.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, fields
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .fem import FESpace, _p2_dlambda, dual_norm_neg1, edge_rule, sample_rule
from .model import ModelConstants, Potential, quartic_potential

__all__ = [
    "IndicatorOperator",
    "IndicatorSet",
    "ResidualData",
    "elliptic_indicator",
    "IntervalEstimate",
    "EstimatorReport",
    "IntervalContext",
    "IntervalInputs",
    "interval_bounds",
    "reconstruction_estimators",
    "linf_reconstruction_bound",
    "w13_reconstruction_bound",
    "time_interp_error",
    "residual_bounds_interval",
    "estimate_trajectory",
    "GAUSS4",
]

log = logging.getLogger(__name__)

_x, _w = np.polynomial.legendre.leggauss(4)
GAUSS4 = (0.5 * (_x + 1.0), 0.5 * _w)  # nodes/weights on [0, 1]

SUPPORTED = {(2, -1), (2, 0), (2, 1), (3, 1), (np.inf, 0), (3, 0), (np.inf, 1), (np.inf, -1), (3, -1)}


@dataclass
class ResidualData:
    """Element residual ``g + Lap v_h`` and normal gradient jumps of one field."""

    vol_q: np.ndarray  # (nt, nq) at quadrature points
    vol_s: np.ndarray  # (nt, ns) at sampling points
    jump2: np.ndarray  # (ne, nq2) for the L2 edge rule
    jump3: np.ndarray  # (ne, nq3)
    jump_end: np.ndarray  # (ne, 2) at edge endpoints

    def blend(self, other, theta):
        return ResidualData(*[(1.0 - theta) * a + theta * b for a, b in
                              zip(self._parts(), other._parts())])

    def diff(self, other, scale=1.0):
        """``(other - self) * scale``."""
        return ResidualData(*[(b - a) * scale for a, b in zip(self._parts(), other._parts())])

    def _parts(self):
        return [getattr(self, f.name) for f in fields(self)]


@dataclass
class IndicatorSet:
    p: float
    s: int
    eta: np.ndarray
    total: float


class IndicatorOperator:
    """Cached edge and volume operators for residual indicators on one space.

    ``s`` is the Sobolev index of the estimated norm, so the indicator for
    ``|| . ||_{W^{s,p}}`` weights the element residual by ``h_K^(2-s)`` and the
    edge jumps by ``h_K^(1-s+1/p)``.
    """

    def __init__(self, space: FESpace):
        self.space = space
        self.mesh = space.mesh
        self.samples = sample_rule()
        s2, w2 = edge_rule(3)
        s3, w3 = edge_rule(6)
        self._edge_rules = {2: (s2, w2), 3: (s3, w3)}
        self.J2 = self._jump_matrix(s2)
        self.J3 = self._jump_matrix(s3)
        self.Jend = self._jump_matrix(np.array([0.0, 1.0]))
        h_min = float(self.mesh.diameters.min())
        self.log_hmin_sq = np.log(h_min) ** 2
        if h_min > 0.5:
            warnings.warn(f"h_min = {h_min:.3g} > 0.5: the ln(h_min)^2 weight of the L-infinity bound degenerates",
                          RuntimeWarning, stacklevel=2)

    def _jump_matrix(self, s):
        """Sparse map from coefficients to ``[[grad v]] . n`` at edge points (boundary: ``grad v . n``)."""
        mesh, space = self.mesh, self.space
        ne, nq = mesh.n_edges, len(s)
        rows, cols, vals = [], [], []
        for side, sign in ((0, 1.0), (1, -1.0)):
            e = np.flatnonzero(mesh.edge_tris[:, side] >= 0)
            c = mesh.edge_tris[e, side]
            tri = mesh.triangles[c]
            ia = np.argmax(tri == mesh.edges[e, 0][:, None], axis=1)
            ib = np.argmax(tri == mesh.edges[e, 1][:, None], axis=1)
            bary = np.zeros((len(e), nq, 3))
            r = np.arange(len(e))[:, None]
            bary[r, np.arange(nq)[None, :], ia[:, None]] = 1.0 - s[None, :]
            bary[r, np.arange(nq)[None, :], ib[:, None]] = s[None, :]
            d = _p2_dlambda(bary.reshape(-1, 3)).reshape(len(e), nq, 6, 3)
            g = np.einsum("eqik,ekd->eqid", d, space.grad_bary[c])
            dn = sign * np.einsum("eqid,ed->eqi", g, mesh.edge_normals[e])
            rows.append(np.broadcast_to((e * nq)[:, None, None] + np.arange(nq)[None, :, None], dn.shape).ravel())
            cols.append(np.broadcast_to(space.cell_dofs[c][:, None, :], dn.shape).ravel())
            vals.append(dn.ravel())
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(ne * nq, space.n_dofs))
        A.sum_duplicates()
        return A

    def residual(self, v, g_q, g_s):
        """Residual data for ``v_h`` (coefficients) and data ``g`` at quadrature / sample points."""
        lap = self.space.laplacian(v)[:, None]
        ne = self.mesh.n_edges
        return ResidualData(
            vol_q=g_q + lap,
            vol_s=g_s + lap,
            jump2=(self.J2 @ v).reshape(ne, -1),
            jump3=(self.J3 @ v).reshape(ne, -1),
            jump_end=(self.Jend @ v).reshape(ne, -1),
        )

    @cached_property
    def _qweights(self):
        return self.space.weights()

    def _edge_norms(self, data: ResidualData, p):
        """Per-edge ``||J||_{p,e}^p`` (or max for ``p = inf``)."""
        if p == np.inf:
            return np.max(np.abs(data.jump_end), axis=1)
        J = data.jump2 if p == 2 else data.jump3
        _, w = self._edge_rules[2 if p == 2 else 3]
        return self.mesh.edge_lengths * (np.abs(J) ** p @ w)

    def _parts(self, data: ResidualData, p):
        """Per-cell volume and boundary norms ``(||R||_{p,K}, ||J||_{p,dK})``."""
        edge = self._edge_norms(data, p)[self.mesh.tri_edges]  # (nt, 3)
        if p == np.inf:
            return np.max(np.abs(data.vol_s), axis=1), np.max(edge, axis=1)
        vol = np.sum(self._qweights * np.abs(data.vol_q) ** p, axis=1) ** (1.0 / p)
        return vol, np.sum(edge, axis=1) ** (1.0 / p)

    def _hpow(self, e):
        cache = self.__dict__.setdefault("_hpow_cache", {})
        if e not in cache:
            cache[e] = self.mesh.diameters ** e
        return cache[e]

    def indicator(self, data: ResidualData, p, s, parts=None):
        if (p, s) not in SUPPORTED:
            raise ValueError(f"unsupported indicator (p={p}, s={s})")
        vol, bnd = parts if parts is not None else self._parts(data, p)
        edge_exp = 1 - s + (0.0 if p == np.inf else 1.0 / p)
        return self._hpow(2 - s) * vol + self._hpow(edge_exp) * bnd

    def aggregate(self, data: ResidualData, p, s, parts=None):
        eta = self.indicator(data, p, s, parts)
        if p == np.inf:
            return float(eta.max())
        return float(np.sum(eta**p) ** (1.0 / p))


def elliptic_indicator(g, v_h, p, s, op: IndicatorOperator | None = None):
    """Indicators ``eta`` per triangle and their aggregate for data ``g`` and ``v_h``.

    ``g`` is a callable ``g(rule) -> (nt, n_points)`` values, a callable of
    coordinates ``g(x, y)``, a constant, or an FE function.
    """
    space = v_h.space
    op = op or IndicatorOperator(space)
    g_q = _eval_field(g, space, space.rule)
    g_s = _eval_field(g, space, op.samples)
    data = op.residual(v_h.coeffs, g_q, g_s)
    eta = op.indicator(data, p, s)
    total = float(eta.max()) if p == np.inf else float(np.sum(eta**p) ** (1.0 / p))
    return IndicatorSet(p, s, eta, total)


def _eval_field(g, space, rule):
    shape = (space.mesh.n_triangles, rule.n_points)
    if hasattr(g, "coeffs"):
        return space.eval(g.coeffs, rule)
    if callable(g):
        try:
            return np.broadcast_to(g(rule), shape)
        except TypeError:
            x = space.points(rule)
            return np.broadcast_to(g(x[..., 0], x[..., 1]), shape)
    return np.full(shape, float(g))


# -- interval quantities -----------------------------------------------------------


@dataclass
class NodeData:
    """Per-time-node quantities shared by the two adjacent intervals."""

    phi: np.ndarray
    mu: np.ndarray
    res: ResidualData
    phi_s: np.ndarray
    mu_s: np.ndarray
    dfp_q: np.ndarray
    phi_q: np.ndarray
    grad_q: np.ndarray


@dataclass
class IntervalEstimate:
    """All per-interval quantities; H-values are time integrals over the interval."""

    n: int
    t: float
    H0: float
    H1: float
    Hm1: float
    H0_dt: float
    Hm1_dt: float
    est1: float
    est2: float
    est3: float
    est4: float
    fdiff: float
    linf_bound: float
    w13_bound: float
    time_interp_l2: float
    time_interp_hm1: float
    # inputs to the stability certificate
    mu_inf_mid: float
    mu_inf_max: float
    linf_mid: float
    dt_phi_hat_inf: float
    grad_hat3_max: float
    phi_inf_max: float


CSV_COLUMNS = [f.name for f in fields(IntervalEstimate)]


@dataclass
class EstimatorReport:
    intervals: list
    gamma: float
    tau: float
    h_min: float
    h_max: float

    def column(self, name):
        return np.array([getattr(iv, name) for iv in self.intervals])

    def totals(self):
        return {k: float(np.sum(self.column(k))) for k in ("est1", "est2", "est3", "est4", "fdiff",
                                                          "H0", "H1", "Hm1", "H0_dt", "Hm1_dt")}

    def rows(self):
        return [asdict(iv) for iv in self.intervals]


class IntervalContext:
    """Evaluates reconstruction estimators and residual bounds along a trajectory."""

    def __init__(self, traj, constants: ModelConstants, potential: Potential | None = None,
                 op: IndicatorOperator | None = None):
        self.traj = traj
        self.space = traj.space
        self.gamma = traj.gamma
        self.tau = traj.tau
        self.constants = constants
        self.potential = potential or quartic_potential()
        self.op = op or IndicatorOperator(self.space)
        self._cache = {}

    def node(self, k) -> NodeData:
        if k in self._cache:
            return self._cache[k]
        if len(self._cache) > 3:
            self._cache.pop(min(self._cache))
        space, op, pot = self.space, self.op, self.potential
        phi, mu = self.traj.phi[k], self.traj.mu[k]
        phi_q = space.eval(phi)
        phi_s = space.eval(phi, op.samples)
        mu_q = space.eval(mu)
        mu_s = space.eval(mu, op.samples)
        dfp_q = pot.df(phi_q)
        g_q = mu_q - dfp_q / self.gamma
        g_s = mu_s - pot.df(phi_s) / self.gamma
        data = NodeData(phi, mu, op.residual(phi, g_q, g_s), phi_s, mu_s, dfp_q, phi_q, space.grad(phi))
        self._cache[k] = data
        return data

    # estimators at theta in [0, 1] of interval n
    def _at(self, a: NodeData, b: NodeData, theta):
        op = self.op
        r = a.res.blend(b.res, theta)
        p2 = op._parts(r, 2)
        E20 = op.aggregate(r, 2, 0, p2)
        E21 = op.aggregate(r, 2, 1, p2)
        E2m1 = op.aggregate(r, 2, -1, p2)
        Einf = op.aggregate(r, np.inf, 0)
        E31 = op.aggregate(r, 3, 1)
        phi_inf = float(np.max(np.abs((1 - theta) * a.phi_s + theta * b.phi_s)))
        grad = (1 - theta) * a.grad_q + theta * b.grad_q
        grad3 = float(np.sum(self.op._qweights * np.sum(grad * grad, axis=-1) ** 1.5) ** (1 / 3))
        return {
            "H0": E20**2, "H1": E21**2, "Hm1": E2m1**2,
            "linf": op.log_hmin_sq * Einf + phi_inf,
            "phi_inf": phi_inf,
            "w13": E31,
            "grad3": grad3,
        }

    def time_derivative_estimators(self, a: NodeData, b: NodeData):
        r = a.res.diff(b.res, 1.0 / self.tau)
        op = self.op
        dphi_s = (b.phi_s - a.phi_s) / self.tau
        p2 = op._parts(r, 2)
        return {
            "H0_dt": op.aggregate(r, 2, 0, p2) ** 2,
            "Hm1_dt": op.aggregate(r, 2, -1, p2) ** 2,
            "dt_phi_hat_inf": op.log_hmin_sq * op.aggregate(r, np.inf, 0) + float(np.max(np.abs(dphi_s))),
        }

    def time_interp(self, a: NodeData, b: NodeData):
        """``int_{I_n} ||I_1[f'(phi)] - f'(phi)||^2`` in L2 and discrete H^-1 (4-point Gauss, exact)."""
        theta, w = GAUSS4
        space = self.space
        W = self.op._qweights
        l2 = hm1 = 0.0
        for th, wt in zip(theta, w):
            phi_q = (1 - th) * a.phi_q + th * b.phi_q
            e = (1 - th) * a.dfp_q + th * b.dfp_q - self.potential.df(phi_q)
            l2 += wt * float(np.sum(W * e * e))
            hm1 += wt * dual_norm_neg1(space, space.load(e)) ** 2
        return self.tau * l2, self.tau * hm1

    def inputs(self, n) -> "IntervalInputs":
        """Norms and Gauss-in-time samples entering the bounds on ``I_n``."""
        tau, space = self.tau, self.space
        a, b = self.node(n), self.node(n + 1)
        theta, _ = GAUSS4
        samples = [self._at(a, b, th) for th in theta]
        mid = self._at(a, b, 0.5)
        dt = self.time_derivative_estimators(a, b)
        ti_l2, ti_hm1 = self.time_interp(a, b)
        W = self.op._qweights
        mu_b_q = space.eval(b.mu)
        dphi_q = space.eval((b.phi - a.phi) / tau)
        dmu = (b.mu - a.mu) / tau
        dmu_q = space.eval(dmu)
        col = lambda key: np.array([s[key] for s in samples])  # noqa: E731
        return IntervalInputs(
            n=n, t=n * tau, tau=tau,
            H0=col("H0"), H1=col("H1"), Hm1=col("Hm1"),
            linf=col("linf"), phi_inf=col("phi_inf"), w13=col("w13"), grad3=col("grad3"),
            H0_dt=dt["H0_dt"], Hm1_dt=dt["Hm1_dt"],
            mu3=float(np.sum(W * np.abs(mu_b_q) ** 3) ** (1 / 3)),
            dphi_6=float(np.sum(W * dphi_q**6) ** (1 / 6)),
            dphi_0=float(np.sqrt(np.sum(W * dphi_q**2))),
            dmu_0=float(np.sqrt(np.sum(W * dmu_q**2))),
            dmu_m1=dual_norm_neg1(space, space.M @ dmu),
            time_interp_l2=ti_l2, time_interp_hm1=ti_hm1,
            mu_inf_mid=float(np.max(np.abs(0.5 * (a.mu_s + b.mu_s)))),
            mu_inf_max=float(max(np.max(np.abs(a.mu_s)), np.max(np.abs(b.mu_s)))),
            linf_mid=mid["linf"], linf_max=max(mid["linf"], *col("linf")),
            w13_max=max(mid["w13"], *col("w13")),
            phi_inf_max=max(mid["phi_inf"], *col("phi_inf")),
            grad_hat3_max=max(mid["grad3"] + mid["w13"], *(col("grad3") + col("w13"))),
            dt_phi_hat_inf=dt["dt_phi_hat_inf"],
        )

    def interval(self, n) -> IntervalEstimate:
        return interval_bounds(self.inputs(n), self.constants, self.gamma, self.potential)


@dataclass
class IntervalInputs:
    """Everything the interval bounds depend on.

    Arrays hold values at the 4-point Gauss nodes of the interval; the
    estimator-of-time-derivative values are constant on the interval.
    """

    n: int
    t: float
    tau: float
    H0: np.ndarray
    H1: np.ndarray
    Hm1: np.ndarray
    linf: np.ndarray
    phi_inf: np.ndarray
    w13: np.ndarray
    grad3: np.ndarray
    H0_dt: float
    Hm1_dt: float
    mu3: float
    dphi_6: float
    dphi_0: float
    dmu_0: float
    dmu_m1: float
    time_interp_l2: float
    time_interp_hm1: float
    mu_inf_mid: float = 0.0
    mu_inf_max: float = 0.0
    linf_mid: float = 0.0
    linf_max: float = 0.0
    w13_max: float = 0.0
    phi_inf_max: float = 0.0
    grad_hat3_max: float = 0.0
    dt_phi_hat_inf: float = 0.0


def interval_bounds(x: IntervalInputs, constants: ModelConstants, gamma,
                    potential: Potential | None = None) -> IntervalEstimate:
    """Assemble the four residual bounds and the f''-difference term on one interval.

    ``est1``/``est2`` bound the time integrals of ``||r1||_0^2`` and
    ``||r1||_{-1}^2``; ``est3``/``est4`` bound ``gamma^2`` times those of ``r2``.
    """
    potential = potential or quartic_potential()
    c = constants
    gc, gk = c.growth_const, c.growth_coef
    tau = x.tau
    theta, w = GAUSS4

    def integral(values):
        return float(tau * np.dot(w, values))

    H0_int, H1_int, Hm1_int = integral(x.H0), integral(x.H1), integral(x.Hm1)
    b2sq, b3sq = c.b2**2, c.b3**2
    mu3sq = x.mu3**2

    est1 = (tau * x.H0_dt + b3sq * mu3sq * H1_int
            + tau**3 / 3.0 * (b3sq * x.dphi_6**2 * mu3sq + b2sq * x.dmu_0**2))
    est2 = (tau * x.Hm1_dt + b3sq * mu3sq * H0_int
            + x.dmu_m1**2 * integral((tau * (theta - 1.0)) ** 2 * (b3sq * x.w13**2 + b3sq * x.grad3**2))
            + tau**3 * (b3sq * x.dphi_0**2 * mu3sq + b2sq * x.dmu_m1**2))

    f2fac = (gc[2] + gk[2] * (x.linf**2 + x.phi_inf**2)) ** 2
    f3fac = (gc[3] + gk[3] * (x.linf + x.phi_inf)) ** 2
    grad_sum = 2.0 * x.grad3 + x.w13  # ||grad phi|| + ||grad phi_hat||
    est3 = x.time_interp_l2 + integral(f2fac * x.H0)
    est4 = x.time_interp_hm1 + integral(f2fac * x.Hm1 + f3fac * grad_sum**2 * x.Hm1)
    lip = np.array([potential.second_derivative_lipschitz(ra, rb) for ra, rb in zip(x.linf, x.phi_inf)])
    fdiff = c.C_i**2 / gamma**2 * integral(lip**4 * x.H0**2)

    return IntervalEstimate(
        n=x.n, t=x.t,
        H0=H0_int, H1=H1_int, Hm1=Hm1_int,
        H0_dt=tau * x.H0_dt, Hm1_dt=tau * x.Hm1_dt,
        est1=est1, est2=est2, est3=est3, est4=est4, fdiff=fdiff,
        linf_bound=x.linf_max, w13_bound=x.w13_max,
        time_interp_l2=x.time_interp_l2, time_interp_hm1=x.time_interp_hm1,
        mu_inf_mid=x.mu_inf_mid, mu_inf_max=x.mu_inf_max, linf_mid=x.linf_mid,
        dt_phi_hat_inf=x.dt_phi_hat_inf, grad_hat3_max=x.grad_hat3_max, phi_inf_max=x.phi_inf_max,
    )


def reconstruction_estimators(traj, n, theta, constants, potential=None, ctx=None):
    """``(H0, H1, H-1)`` of ``phi_{h,tau}`` at ``t^n + theta tau`` and ``(H0, H-1)`` of its time derivative."""
    ctx = ctx or IntervalContext(traj, constants, potential)
    a, b = ctx.node(n), ctx.node(n + 1)
    s = ctx._at(a, b, theta)
    dt = ctx.time_derivative_estimators(a, b)
    return {"H0": s["H0"], "H1": s["H1"], "Hm1": s["Hm1"], "H0_dt": dt["H0_dt"], "Hm1_dt": dt["Hm1_dt"]}


def linf_reconstruction_bound(traj, n, theta, constants, potential=None, ctx=None):
    """``ln(h_min)^2 E_{inf,0} + ||phi_{h,tau}||_inf`` bounding ``||phi_hat||_inf``."""
    ctx = ctx or IntervalContext(traj, constants, potential)
    return ctx._at(ctx.node(n), ctx.node(n + 1), theta)["linf"]


def w13_reconstruction_bound(traj, n, theta, constants, potential=None, ctx=None):
    """``E_{3,1}`` bounding ``||phi_{h,tau} - phi_hat||_{1,3}``."""
    ctx = ctx or IntervalContext(traj, constants, potential)
    return ctx._at(ctx.node(n), ctx.node(n + 1), theta)["w13"]


def time_interp_error(space, phi_a, phi_b, tau, potential: Potential | None = None):
    """Time integrals of ``||I_1[f'(phi)] - f'(phi)||^2`` in L2 and discrete H^-1."""
    potential = potential or quartic_potential()
    theta, w = GAUSS4
    W = space.weights()
    pa, pb = space.eval(phi_a), space.eval(phi_b)
    fa, fb = potential.df(pa), potential.df(pb)
    l2 = hm1 = 0.0
    for th, wt in zip(theta, w):
        e = (1 - th) * fa + th * fb - potential.df((1 - th) * pa + th * pb)
        l2 += wt * float(np.sum(W * e * e))
        hm1 += wt * dual_norm_neg1(space, space.load(e)) ** 2
    return tau * l2, tau * hm1


def residual_bounds_interval(n, traj, constants, potential=None, ctx=None) -> IntervalEstimate:
    ctx = ctx or IntervalContext(traj, constants, potential)
    return ctx.interval(n)


def estimate_trajectory(traj, constants: ModelConstants, potential: Potential | None = None) -> EstimatorReport:
    """Interval estimates for every ``I_n`` of the trajectory, in order."""
    ctx = IntervalContext(traj, constants, potential)
    intervals = [ctx.interval(n) for n in range(traj.n_steps)]
    h = traj.space.mesh.diameters
    return EstimatorReport(intervals, traj.gamma, traj.tau, float(h.min()), float(h.max()))
