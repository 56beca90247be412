import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from acmobility.estimator import (GAUSS4, IndicatorOperator, IntervalContext, IntervalInputs, elliptic_indicator,
                                  estimate_trajectory, interval_bounds, linf_reconstruction_bound,
                                  reconstruction_estimators, time_interp_error, w13_reconstruction_bound)
from acmobility.fem import FEFunction, FESpace, l2_project
from acmobility.mesh import Mesh, build_structured_mesh
from acmobility.model import (constant_mobility, default_mobility, derive_bound_constants, quadratic_potential,
                              quartic_potential)
from acmobility.solver import Trajectory, initial_chemical_potential, run_simulation

pytestmark = pytest.mark.filterwarnings("ignore:h_min")

QUARTIC = quartic_potential()
DEFAULT = derive_bound_constants(default_mobility(), QUARTIC)
CONSTANT = derive_bound_constants(constant_mobility(), QUARTIC)


def test_interior_cells_vanish_for_global_quadratic(square8):
    x = square8.nodes[:, 0]
    v = FEFunction(square8, x**2)
    ind = elliptic_indicator(-2.0, v, 2, 0)
    mesh = square8.mesh
    # only the boundary flux on x = +-2 survives
    on_side = np.zeros(mesh.n_triangles, dtype=bool)
    for e in mesh.boundary_edges:
        xs = mesh.vertices[mesh.edges[e], 0]
        if np.allclose(np.abs(xs), 2.0):
            on_side[mesh.edge_tris[e, 0]] = True
    assert np.max(ind.eta[~on_side]) < 1e-12
    assert np.all(ind.eta[on_side] > 0)


def test_two_triangle_kink():
    space = FESpace(Mesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]]))
    x, y = space.nodes.T
    v = FEFunction(space, np.maximum(x - y, 0.0))  # kink along the diagonal, piecewise linear
    h = np.sqrt(2.0)
    # lower cell: diagonal jump sqrt(2) on length sqrt(2), boundary fluxes 1 on two unit edges
    jump_lower = np.sqrt(2.0 * np.sqrt(2.0) + 1.0 + 1.0)
    jump_upper = np.sqrt(2.0 * np.sqrt(2.0))
    for s in (-1, 0, 1):
        eta = elliptic_indicator(0.0, v, 2, s).eta
        assert eta == pytest.approx(h ** (1.5 - s) * np.array([jump_lower, jump_upper]), rel=1e-10)
    eta_inf = elliptic_indicator(0.0, v, np.inf, 0).eta
    assert eta_inf == pytest.approx([h * np.sqrt(2.0), h * np.sqrt(2.0)], rel=1e-10)


@pytest.mark.parametrize("p,s", [(2, 0), (2, 1), (2, -1), (3, 1), (np.inf, 0)])
def test_refinement_power_bookkeeping(p, s):
    coarse = FESpace(build_structured_mesh((0, 1, 0, 1), 2))
    fine = FESpace(coarse.mesh.refine())
    # v = 0 and g = 1: only the volume part h^(2-s) |K|^(1/p)
    ec = elliptic_indicator(1.0, FEFunction(coarse, np.zeros(coarse.n_dofs)), p, s).eta
    ef = elliptic_indicator(1.0, FEFunction(fine, np.zeros(fine.n_dofs)), p, s).eta
    area_factor = 1.0 if p == np.inf else 0.25 ** (1.0 / p)
    assert ef.max() / ec.max() == pytest.approx(0.5 ** (2 - s) * area_factor, rel=1e-12)


def test_unsupported_pair_rejected(square8):
    with pytest.raises(ValueError):
        elliptic_indicator(0.0, FEFunction(square8, np.zeros(square8.n_dofs)), 4, 0)


def steady_trajectory(space, steps=2, tau=1e-3, gamma=0.0625):
    return run_simulation(space, lambda x, y: np.ones_like(x), gamma, tau, steps * tau)


def test_steady_state_zero(square8):
    traj = steady_trajectory(square8)
    assert np.max(np.abs(traj.phi - 1.0)) < 1e-12
    rep = estimate_trajectory(traj, DEFAULT)
    for iv in rep.intervals:
        for key in ("H0", "H1", "Hm1", "H0_dt", "Hm1_dt", "est1", "est2", "est3", "est4", "fdiff"):
            assert abs(getattr(iv, key)) <= 1e-12, key
        assert iv.linf_bound == pytest.approx(1.0, abs=1e-12)
        assert iv.w13_bound <= 1e-12


def smooth_state(n, gamma=1.0):
    space = FESpace(build_structured_mesh((-2, 2, -2, 2), n))
    phi = l2_project(lambda x, y: 0.8 * np.cos(np.pi * x / 2) * np.cos(np.pi * y / 2), space).coeffs
    mu = initial_chemical_potential(space, phi, gamma)
    return Trajectory(space, 1e-3, gamma, np.array([phi, phi]), np.array([mu, mu])), space


def test_reconstruction_rates():
    hs, H0, H1, Hm1, W13 = [], [], [], [], []
    for n in (4, 8, 16, 32):
        traj, space = smooth_state(n)
        est = reconstruction_estimators(traj, 0, 0.5, DEFAULT)
        hs.append(space.mesh.diameters.max())
        H0.append(est["H0"])
        H1.append(est["H1"])
        Hm1.append(est["Hm1"])
        W13.append(w13_reconstruction_bound(traj, 0, 0.5, DEFAULT))
        assert est["H0_dt"] == 0.0 and est["Hm1_dt"] == 0.0
    slope = lambda y: np.polyfit(np.log(hs[1:]), np.log(y[1:]), 1)[0]  # noqa: E731
    assert slope(H0) >= 3.7  # at least h^4 (P2 gives h^6)
    assert slope(H1) >= 1.7  # at least h^2 (P2 gives h^4)
    assert slope(Hm1) >= slope(H0) - 0.3
    assert slope(W13) >= 1.7


def test_linf_bound_dominates_discrete_max():
    traj, space = smooth_state(8)
    bound = linf_reconstruction_bound(traj, 0, 0.3, DEFAULT)
    assert bound >= np.max(np.abs(traj.phi[0])) - 1e-12


def test_est1_constant_mobility_hand_assembly(square8):
    gamma, tau = 0.0625, 1e-3
    annulus = lambda x, y: -np.tanh(np.maximum(0.4 - np.hypot(x, y), np.hypot(x, y) - 1) / np.sqrt(2 * gamma))  # noqa: E731
    traj = run_simulation(square8, annulus, gamma, tau, tau, mobility=constant_mobility())
    iv = IntervalContext(traj, CONSTANT).interval(0)
    phi0, phi1 = traj.phi
    dmu = (traj.mu[1] - traj.mu[0]) / tau
    pot = QUARTIC

    def g_dt(rule):
        return (square8.eval(dmu, rule)
                - (pot.df(square8.eval(phi1, rule)) - pot.df(square8.eval(phi0, rule))) / (gamma * tau))

    H0_dt = elliptic_indicator(g_dt, FEFunction(square8, (phi1 - phi0) / tau), 2, 0).total ** 2
    hand = tau * H0_dt + tau**3 / 3.0 * float(dmu @ square8.M @ dmu)
    assert iv.est1 == pytest.approx(hand, rel=1e-12)


def test_time_interp_closed_form(square8):
    n = square8.n_dofs
    l2, hm1 = time_interp_error(square8, np.zeros(n), np.ones(n), 0.01, QUARTIC)
    # e(theta) = theta - theta^3, int_0^1 e^2 = 8/105; constant in space
    assert l2 == pytest.approx(0.01 * 16 * 8 / 105, rel=1e-12)
    assert hm1 == pytest.approx(0.01 * 16 * 8 / 105, rel=1e-10)
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
    assert time_interp_error(square8, a, b, 0.01, quadratic_potential()) == (0.0, 0.0)
    full = time_interp_error(square8, a, b, 0.01, QUARTIC)
    half = time_interp_error(square8, a, b, 0.005, QUARTIC)
    assert half[0] == pytest.approx(0.5 * full[0], rel=1e-14)


def test_gauss4_exact_to_degree_7():
    t, w = GAUSS4
    for k in range(8):
        assert np.sum(w * t**k) == pytest.approx(1 / (k + 1), rel=1e-13)


def _inputs(**kw):
    base = dict(n=0, t=0.0, tau=1e-3, H0=np.full(4, 1e-3), H1=np.full(4, 1e-2), Hm1=np.full(4, 1e-4),
                linf=np.full(4, 1.1), phi_inf=np.full(4, 1.0), w13=np.full(4, 0.1), grad3=np.full(4, 2.0),
                H0_dt=1.0, Hm1_dt=0.1, mu3=3.0, dphi_6=5.0, dphi_0=1.0, dmu_0=10.0, dmu_m1=1.0,
                time_interp_l2=1e-6, time_interp_hm1=1e-7)
    base.update(kw)
    return IntervalInputs(**base)


SCALARS = ["H0_dt", "Hm1_dt", "mu3", "dphi_6", "dphi_0", "dmu_0", "dmu_m1", "time_interp_l2", "time_interp_hm1"]
ARRAYS = ["H0", "H1", "Hm1", "linf", "phi_inf", "w13", "grad3"]


@given(key=st.sampled_from(SCALARS + ARRAYS), factor=st.floats(1.0, 10.0))
def test_bounds_monotone_in_every_input(key, factor):
    x = _inputs()
    y = dataclasses.replace(x, **{key: getattr(x, key) * factor})
    a = interval_bounds(x, DEFAULT, 0.0625)
    b = interval_bounds(y, DEFAULT, 0.0625)
    for name in ("est1", "est2", "est3", "est4", "fdiff"):
        assert getattr(b, name) >= getattr(a, name) * (1 - 1e-14), (key, name)


def test_report_additive_and_deterministic(square8):
    gamma = 0.0625
    annulus = lambda x, y: -np.tanh(np.maximum(0.4 - np.hypot(x, y), np.hypot(x, y) - 1) / np.sqrt(2 * gamma))  # noqa: E731
    traj = run_simulation(square8, annulus, gamma, 2e-3, 6e-3)
    r1 = estimate_trajectory(traj, DEFAULT)
    r2 = estimate_trajectory(traj, DEFAULT)
    assert r1.rows() == r2.rows()
    tot = r1.totals()
    assert tot["est1"] == pytest.approx(sum(iv.est1 for iv in r1.intervals), rel=1e-15)
    ctx = IntervalContext(traj, DEFAULT)
    assert ctx.interval(1) == r1.intervals[1]


def test_operator_warns_on_coarse_mesh():
    with pytest.warns(RuntimeWarning):
        IndicatorOperator(FESpace(build_structured_mesh((-2, 2, -2, 2), 2)))
