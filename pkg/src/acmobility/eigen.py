"""Principal eigenvalue of the linearized steady Allen-Cahn operator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import FEFunction, FESpace
from .model import Potential, quartic_potential

__all__ = ["EigenResult", "EigenSolveError", "principal_eigenvalue", "integrated_positive_eigenvalue",
           "simpson_positive_part"]

RESIDUAL_TOL = 1e-8
REL_CHANGE_TOL = 1e-10


class EigenSolveError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


@dataclass
class EigenResult:
    """``lam`` solves ``-lam <w, psi> = c <grad w, grad psi> + <f''(phi*) w, psi>/gamma``."""

    lam: float
    w: FEFunction
    residual: float
    iterations: int

    @property
    def lam_plus(self):
        return max(self.lam, 0.0)


def _m_orthonormal(Z, M, drop=1e-12):
    MZ = M @ Z
    scale = np.sqrt(np.maximum(np.einsum("ij,ij->j", Z, MZ), np.finfo(float).tiny))
    Z = Z / scale
    G = Z.T @ (M @ Z)
    G = 0.5 * (G + G.T)
    d, V = np.linalg.eigh(G)
    keep = d > drop * d.max()
    return Z @ (V[:, keep] / np.sqrt(d[keep]))


def principal_eigenvalue(phi_star, gamma, half_laplacian=True, potential: Potential | None = None,
                         x0=None, block=3, maxiter=500, tol=RESIDUAL_TOL, seed=0):
    """Smallest eigenpair of ``A x = -lam M x`` with ``A = c K + M_{f''(phi*)}/gamma``.

    ``c = 1/2`` with ``half_laplacian`` (the modified eigenvalue), ``c = 1``
    otherwise. Shift-invert about a shift below the spectrum, accelerated by
    Rayleigh-Ritz on span{X_k, X_{k-1}, (A - s M)^{-1} R_k}; one factorization
    per call.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    potential = potential or quartic_potential()
    space: FESpace = phi_star.space
    M, K = space.M, space.K
    c = 0.5 if half_laplacian else 1.0
    fpp = potential.d2f(phi_star.values())
    A = (c * K + space.mass(fpp) / gamma).tocsr()
    # quadratic form >= min f''/gamma |psi|^2 with positive quadrature weights
    sigma = min(-potential.f1, float(np.min(fpp))) / gamma - 1.0
    lu = splu(sp.csc_matrix(A - sigma * M), permc_spec="MMD_AT_PLUS_A")

    n = space.n_dofs
    rng = np.random.default_rng(seed)
    cols = [np.ones(n)]
    if x0 is not None:
        cols.insert(0, np.asarray(x0, dtype=float))
    while len(cols) < block:
        cols.append(rng.standard_normal(n))
    X = _m_orthonormal(np.column_stack(cols[:block]), M)
    P = None
    theta_old = np.inf
    history = []
    for it in range(1, maxiter + 1):
        AX = A @ X
        H = X.T @ AX
        theta, V = np.linalg.eigh(0.5 * (H + H.T))
        X = X @ V
        AX = AX @ V
        R = AX - (M @ X) * theta
        res = float(np.linalg.norm(R[:, 0]))
        history.append(res)
        if res <= tol and abs(theta[0] - theta_old) <= REL_CHANGE_TOL * max(1.0, abs(theta[0])):
            x = X[:, 0]
            x = x / np.sqrt(x @ (M @ x))
            if np.sum(x) < 0 or (np.sum(x) == 0 and x[np.argmax(np.abs(x))] < 0):
                x = -x
            return EigenResult(-float(theta[0]), FEFunction(space, x), res, it)
        theta_old = theta[0]
        W = lu.solve(R)
        parts = [X, W] if P is None else [X, W, P]
        Z = _m_orthonormal(np.column_stack(parts), M)
        H = Z.T @ (A @ Z)
        _, U = sla.eigh(0.5 * (H + H.T))
        X_new = Z @ U[:, : X.shape[1]]
        P = X_new - X @ (X.T @ (M @ X_new))
        X = X_new
    raise EigenSolveError(f"eigen-solve did not converge in {maxiter} iterations (residual {history[-1]:.2e})",
                          history)


def simpson_positive_part(lam_left, lam_mid, lam_right, tau):
    """Simpson rule for ``int lam_+`` over one interval."""
    return tau / 6.0 * (max(lam_left, 0.0) + 4.0 * max(lam_mid, 0.0) + max(lam_right, 0.0))


def integrated_positive_eigenvalue(traj, gamma=None, potential: Potential | None = None,
                                   half_laplacian=True):
    """Eigenvalues at ``t^n``, ``t^{n+1/2}``, ``t^{n+1}`` and Simpson integrals of ``lam_+``.

    Returns a dict with ``nodes`` (N+1), ``mid`` (N), ``per_interval`` (N)
    and ``cumulative`` (N+1, starting at 0).
    """
    gamma = traj.gamma if gamma is None else gamma
    space = traj.space
    N = traj.n_steps
    nodes = np.empty(N + 1)
    mids = np.empty(N)
    x0 = None
    for k in range(N + 1):
        r = principal_eigenvalue(FEFunction(space, traj.phi[k]), gamma, half_laplacian, potential, x0=x0)
        nodes[k] = r.lam
        x0 = r.w.coeffs
        if k < N:
            rm = principal_eigenvalue(FEFunction(space, 0.5 * (traj.phi[k] + traj.phi[k + 1])), gamma,
                                      half_laplacian, potential, x0=x0)
            mids[k] = rm.lam
    per = np.array([simpson_positive_part(nodes[k], mids[k], nodes[k + 1], traj.tau) for k in range(N)])
    cum = np.concatenate([[0.0], np.cumsum(per)])
    return {"nodes": nodes, "mid": mids, "per_interval": per, "cumulative": cum}
