import numpy as np
import pytest
import scipy.linalg as sla

from acmobility.eigen import (EigenSolveError, integrated_positive_eigenvalue, principal_eigenvalue,
                              simpson_positive_part)
from acmobility.fem import FEFunction, l2_project
from acmobility.model import quartic_potential
from acmobility.solver import Trajectory


def smooth_field(space, rng):
    a, b, c = rng.uniform(0.3, 1.5, 3)
    return l2_project(lambda x, y: np.tanh(a * x - b * y + c * np.sin(x * y)), space)


@pytest.mark.parametrize("gamma", [1.0, 0.0625, 2.0**-8])
def test_constant_states(square8, gamma):
    n = square8.n_dofs
    r0 = principal_eigenvalue(FEFunction(square8, np.zeros(n)), gamma)
    assert r0.lam == pytest.approx(1.0 / gamma, rel=1e-8)
    r1 = principal_eigenvalue(FEFunction(square8, np.ones(n)), gamma)
    assert r1.lam == pytest.approx(-2.0 / gamma, rel=1e-8)
    assert r1.lam_plus == 0.0


def test_half_laplacian_identity(square8, rng):
    for _ in range(5):
        phi = smooth_field(square8, rng)
        gamma = rng.uniform(0.02, 0.5)
        half = principal_eigenvalue(phi, 2 * gamma, half_laplacian=True).lam
        full = principal_eigenvalue(phi, gamma, half_laplacian=False).lam
        assert 2 * half == pytest.approx(full, rel=1e-7)


def test_against_dense_generalized_eigensolver(unit4, rng):
    pot = quartic_potential()
    phi = smooth_field(unit4, rng)
    gamma = 0.05
    A = (0.5 * unit4.K + unit4.mass(pot.d2f(phi.values())) / gamma).toarray()
    lam_dense = -sla.eigh(A, unit4.M.toarray(), eigvals_only=True, subset_by_index=[0, 0])[0]
    r = principal_eigenvalue(phi, gamma)
    assert r.lam == pytest.approx(lam_dense, rel=1e-9)
    w = r.w.coeffs
    assert w @ unit4.M @ w == pytest.approx(1.0, rel=1e-12)
    rayleigh = 0.5 * w @ unit4.K @ w + w @ unit4.mass(pot.d2f(phi.values())) @ w / gamma
    assert -r.lam == pytest.approx(rayleigh, rel=1e-9)


def test_simpson_rule():
    assert simpson_positive_part(0.0, 4.0, 0.0, 0.3) == pytest.approx(8 / 3 * 0.3)
    assert simpson_positive_part(-1.0, -2.0, -3.0, 0.3) == 0.0


def test_constant_eigenvalue_trajectory(square8):
    n = square8.n_dofs
    gamma, tau = 0.25, 0.01
    traj = Trajectory(square8, tau, gamma, np.zeros((4, n)), np.zeros((4, n)))
    res = integrated_positive_eigenvalue(traj)
    assert res["cumulative"][-1] == pytest.approx(3 * tau / gamma, rel=1e-8)
    assert np.all(np.diff(res["cumulative"]) >= 0)


def test_non_convergence_raises(square8, rng):
    with pytest.raises(EigenSolveError) as info:
        principal_eigenvalue(smooth_field(square8, rng), 0.01, maxiter=1)
    assert len(info.value.history) == 1
    with pytest.raises(ValueError):
        principal_eigenvalue(smooth_field(square8, rng), 0.0)
