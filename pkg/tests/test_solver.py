import numpy as np
import pytest

from acmobility.config import initial_condition_annulus
from acmobility.fem import FESpace, l2_project
from acmobility.mesh import build_structured_mesh
from acmobility.model import constant_mobility, default_mobility, quadratic_potential, quartic_potential
from acmobility.solver import (StepFailure, advance_timestep, discrete_energy, initial_chemical_potential,
                               load_trajectory, run_simulation, save_trajectory)


def annulus(gamma):
    return lambda x, y: initial_condition_annulus(np.stack([x, y], axis=-1), gamma)


def test_initial_mu_constants(square8):
    n = square8.n_dofs
    assert np.max(np.abs(initial_chemical_potential(square8, np.ones(n), 0.1))) < 1e-12
    assert np.max(np.abs(initial_chemical_potential(square8, np.zeros(n), 0.1))) == 0.0


def test_initial_mu_dense_oracle(unit4):
    pot = quartic_potential()
    phi = l2_project(lambda x, y: x, unit4).coeffs
    gamma = 0.3
    got = initial_chemical_potential(unit4, phi, gamma, pot)
    rhs = unit4.K.toarray() @ phi + unit4.load(pot.df(unit4.eval(phi))) / gamma
    oracle = np.linalg.solve(unit4.M.toarray(), rhs)
    assert np.max(np.abs(got - oracle)) < 1e-10


def test_fixed_point(square8):
    phi, mu = advance_timestep(square8, np.ones(square8.n_dofs), 1e-3, 0.0625)
    assert np.max(np.abs(phi - 1)) < 1e-12 and np.max(np.abs(mu)) < 1e-12


def test_linear_reduction_matches_direct_solve(unit4, rng):
    M, K = unit4.M.toarray(), unit4.K.toarray()
    phi_old = rng.uniform(-1, 1, unit4.n_dofs)
    tau, gamma = 0.01, 0.2
    phi, mu = advance_timestep(unit4, phi_old, tau, gamma, quadratic_potential(), constant_mobility())
    # M (phi - phi_old)/tau + M mu = 0,  M mu = K phi + M phi / gamma
    A = np.block([[M / tau, M], [-K - M / gamma, M]])
    x = np.linalg.solve(A, np.concatenate([M @ phi_old / tau, np.zeros(unit4.n_dofs)]))
    assert np.max(np.abs(phi - x[: unit4.n_dofs])) < 1e-10
    assert np.max(np.abs(mu - x[unit4.n_dofs:])) < 1e-10


def test_one_step_run_matches_advance(square8):
    gamma, tau = 0.0625, 1e-3
    traj = run_simulation(square8, annulus(gamma), gamma, tau, tau)
    phi0 = l2_project(annulus(gamma), square8).coeffs
    assert np.allclose(traj.phi[0], phi0)
    phi1, mu1 = advance_timestep(square8, phi0, tau, gamma, mu_guess=traj.mu[0])
    assert np.allclose(traj.phi[1], phi1, atol=1e-10)
    assert np.allclose(traj.mu[1], mu1, atol=1e-9)


def test_trajectory_times_and_interpolation(square8):
    traj = run_simulation(square8, annulus(0.0625), 0.0625, 2e-3, 0.01)
    assert traj.n_steps == 5
    assert np.array_equal(traj.times, np.arange(6) * 2e-3)
    assert np.allclose(traj.phi_at(3e-3), 0.5 * (traj.phi[1] + traj.phi[2]))
    assert np.allclose(traj.phi_at(4e-3), traj.phi[2])
    # initial identity for mu^0
    mu0 = initial_chemical_potential(square8, traj.phi[0], 0.0625)
    assert np.allclose(traj.mu[0], mu0)


def test_energy_decreases_and_max_principle():
    space = FESpace(build_structured_mesh((-2, 2, -2, 2), 24))
    gamma = 0.0625
    traj = run_simulation(space, annulus(gamma), gamma, 2e-3, 0.04)
    E = [discrete_energy(space, p, gamma) for p in traj.phi]
    assert np.all(np.diff(E) <= 1e-10)
    assert np.max(np.abs(traj.phi[1:])) <= 1.1


def test_rejects_non_integer_steps(square8):
    with pytest.raises(ValueError):
        run_simulation(square8, annulus(0.0625), 0.0625, 3e-3, 0.01)
    with pytest.raises(ValueError):
        advance_timestep(square8, np.zeros(square8.n_dofs), 0.0, 0.1)


def test_newton_failure_reports_history(square8):
    phi0 = l2_project(annulus(0.0625), square8).coeffs
    with pytest.raises(StepFailure) as info:
        advance_timestep(square8, phi0, 1e-2, 0.0625, maxiter=1)
    assert len(info.value.history) == 2


def test_lu_reuse_agrees_with_fresh_factorization(square8):
    gamma = 0.0625
    phi0 = l2_project(annulus(gamma), square8).coeffs
    cache = {}
    a = advance_timestep(square8, phi0, 1e-3, gamma, lu_cache=cache)
    b = advance_timestep(square8, a[0], 1e-3, gamma, lu_cache=cache)
    c = advance_timestep(square8, a[0], 1e-3, gamma)
    assert np.max(np.abs(b[0] - c[0])) < 1e-9
    assert cache["factorizations"] >= 1


def test_save_load_round_trip(tmp_path, square8):
    traj = run_simulation(square8, annulus(0.0625), 0.0625, 5e-3, 0.01, mobility=default_mobility())
    save_trajectory(traj, tmp_path / "run")
    back = load_trajectory(tmp_path / "run")
    assert np.array_equal(back.phi, traj.phi) and np.array_equal(back.mu, traj.mu)
    assert back.tau == traj.tau and back.gamma == traj.gamma
    assert back.space.mesh.fingerprint == square8.mesh.fingerprint


def test_energy_examples(square8):
    x = square8.nodes[:, 0]
    gamma = 0.5
    pot = quartic_potential()
    assert discrete_energy(square8, np.zeros(square8.n_dofs), gamma) == pytest.approx(16 * 0.25 / gamma)
    # phi = x is in the space: 1/2 int 1 + int (x^2 - 1)^2 / 4 / gamma, the latter = 4 * (int_-2^2 ...)
    one_d = 2 * (2**5 / 5 - 2 * 2**3 / 3 + 2)  # int_{-2}^{2} (x^2 - 1)^2 dx
    exact = 0.5 * 16 + 4 * one_d / 4 / gamma
    assert discrete_energy(square8, x, gamma, pot) == pytest.approx(exact, rel=1e-12)
