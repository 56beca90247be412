"""Implicit Euler / Newton time stepping for Allen-Cahn with explicit mobility."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import FEFunction, FESpace, l2_project, solve_sparse
from .mesh import Mesh
from .model import Mobility, Potential, default_mobility, free_energy, quartic_potential

__all__ = [
    "StepFailure",
    "Trajectory",
    "initial_chemical_potential",
    "advance_timestep",
    "run_simulation",
    "discrete_energy",
    "save_trajectory",
    "load_trajectory",
]

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-9
NEWTON_MAXITER = 25
REFINE_RTOL = 1e-10
REFINE_MAXITER = 6
TRAJECTORY_FORMAT = "acmobility-trajectory/1"


class StepFailure(RuntimeError):
    """Newton did not converge; ``residual`` holds the last residual norm."""

    def __init__(self, message, step=None, residual=None, history=(), trajectory=None):
        super().__init__(message)
        self.step = step
        self.residual = residual
        self.history = list(history)
        self.trajectory = trajectory


@dataclass
class Trajectory:
    """Nodal values ``phi[n], mu[n]`` at ``t^n = n * tau``, n = 0..N."""

    space: FESpace
    tau: float
    gamma: float
    phi: np.ndarray
    mu: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self):
        return len(self.phi) - 1

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.tau

    @property
    def T(self):
        return self.n_steps * self.tau

    def phi_at(self, t):
        """Piecewise linear interpolant in time."""
        return self._interp(self.phi, t)

    def mu_at(self, t):
        return self._interp(self.mu, t)

    def _interp(self, arr, t):
        s = t / self.tau
        n = min(max(int(np.floor(s)), 0), self.n_steps - 1) if self.n_steps else 0
        theta = s - n
        if self.n_steps == 0:
            return arr[0].copy()
        return (1.0 - theta) * arr[n] + theta * arr[n + 1]

    def function(self, coeffs):
        return FEFunction(self.space, coeffs)


def _f_load(space, coeffs, potential, deriv=1):
    return space.load(potential.derivative(deriv)(space.eval(coeffs)))


def initial_chemical_potential(space: FESpace, phi0, gamma, potential: Potential | None = None):
    """``mu^0`` with ``<mu^0, xi> = <grad phi^0, grad xi> + <f'(phi^0), xi>/gamma``."""
    potential = potential or quartic_potential()
    phi0 = np.asarray(phi0, dtype=float)
    rhs = space.K @ phi0 + _f_load(space, phi0, potential) / gamma
    return solve_sparse(space.M, rhs, factor=space._mass_solver)


def _residual(space, phi, mu, phi_old, B, tau, gamma, potential):
    M, K = space.M, space.K
    r1 = M @ (phi - phi_old) / tau + B @ mu
    r2 = M @ mu - K @ phi - _f_load(space, phi, potential) / gamma
    return r1, r2


def advance_timestep(space: FESpace, phi_old, tau, gamma, potential: Potential | None = None,
                     mobility: Mobility | None = None, mu_guess=None, tol=NEWTON_TOL,
                     maxiter=NEWTON_MAXITER, return_info=False, lu_cache=None):
    """One step of the scheme; returns ``(phi_new, mu_new)``.

    Newton on the monolithic (phi, mu) system with the exact Jacobian of
    ``f'`` and the mobility frozen at ``phi_old``. Passing a dict as
    ``lu_cache`` keeps the last LU factorization and reuses it for defect correction on
    later Jacobians, refactoring only when that stalls.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    potential = potential or quartic_potential()
    mobility = mobility or default_mobility()
    phi_old = np.asarray(phi_old, dtype=float)
    M, K = space.M, space.K
    B = space.mass(mobility.b(space.eval(phi_old)))
    phi = phi_old.copy()
    mu = np.zeros_like(phi) if mu_guess is None else np.asarray(mu_guess, dtype=float).copy()
    n = space.n_dofs
    history = []
    for it in range(maxiter + 1):
        r1, r2 = _residual(space, phi, mu, phi_old, B, tau, gamma, potential)
        res = max(np.max(np.abs(r1)), np.max(np.abs(r2)))
        history.append(float(res))
        if not np.isfinite(res):
            break
        if res <= tol:
            if return_info:
                return phi, mu, {"iterations": it, "history": history}
            return phi, mu
        if it == maxiter:
            break
        Mf = space.mass(potential.d2f(space.eval(phi)))
        J = sp.bmat([[M / tau, B], [-K - Mf / gamma, M]], format="csc")
        dx = _newton_direction(J, -np.concatenate([r1, r2]), lu_cache)
        phi += dx[:n]
        mu += dx[n:]
    raise StepFailure(f"Newton failed after {len(history) - 1} iterations (residual {history[-1]:.3e})",
                      residual=history[-1], history=history)


def _newton_direction(J, rhs, lu_cache):
    if lu_cache is not None and "lu" in lu_cache and lu_cache["lu"].shape == J.shape:
        # defect correction preconditioned by the stale factorization
        lu = lu_cache["lu"]
        target = REFINE_RTOL * np.linalg.norm(rhs)
        dx = lu.solve(rhs)
        for _ in range(REFINE_MAXITER):
            r = rhs - J @ dx
            if np.linalg.norm(r) <= target:
                return dx
            dx += lu.solve(r)
    lu = splu(J, permc_spec="MMD_AT_PLUS_A")
    if lu_cache is not None:
        lu_cache["lu"] = lu
        lu_cache["factorizations"] = lu_cache.get("factorizations", 0) + 1
    return lu.solve(rhs)


def discrete_energy(space: FESpace, phi, gamma, potential: Potential | None = None):
    """Free energy ``int |grad phi|^2/2 + f(phi)/gamma`` of a coefficient vector."""
    return free_energy(space, np.asarray(phi, float), gamma, potential or quartic_potential())


def run_simulation(space: FESpace, phi0, gamma, tau, T, potential: Potential | None = None,
                   mobility: Mobility | None = None, callback=None):
    """Integrate from ``phi_h^0 = pi_h phi0`` up to ``T = N tau``.

    ``phi0`` is a callable ``phi0(x, y)`` (projected) or a coefficient vector
    (used as is). ``callback(n, phi, mu)`` is invoked after every node.
    """
    potential = potential or quartic_potential()
    mobility = mobility or default_mobility()
    N = int(round(T / tau))
    if N < 1 or abs(N * tau - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T/tau = {T / tau!r} is not a positive integer")
    if callable(phi0):
        phi = l2_project(phi0, space).coeffs
    else:
        phi = np.asarray(phi0, dtype=float).copy()
    mu = initial_chemical_potential(space, phi, gamma, potential)
    phis = np.empty((N + 1, space.n_dofs))
    mus = np.empty_like(phis)
    phis[0], mus[0] = phi, mu
    meta = {"gamma": gamma, "tau": tau, "T": T, "N": N, "mesh": space.mesh.fingerprint,
            "potential": potential.name, "mobility": mobility.name, "newton_iterations": []}
    if callback:
        callback(0, phi, mu)
    lu_cache = {}
    for k in range(N):
        try:
            phi, mu, info = advance_timestep(space, phi, tau, gamma, potential, mobility,
                                             mu_guess=mu, return_info=True, lu_cache=lu_cache)
        except StepFailure as exc:
            exc.step = k
            exc.trajectory = Trajectory(space, tau, gamma, phis[: k + 1].copy(), mus[: k + 1].copy(), meta)
            raise
        phis[k + 1], mus[k + 1] = phi, mu
        meta["newton_iterations"].append(info["iterations"])
        if callback:
            callback(k + 1, phi, mu)
    meta["factorizations"] = lu_cache.get("factorizations", 0)
    log.debug("simulation done: N=%d, newton its=%s", N, meta["newton_iterations"][:5])
    return Trajectory(space, tau, gamma, phis, mus, meta)


def save_trajectory(traj: Trajectory, path):
    """Write ``<path>.npz`` (mesh + coefficients) and ``<path>.json`` (manifest)."""
    path = Path(path)
    mesh = traj.space.mesh
    np.savez_compressed(path.with_suffix(".npz"), vertices=mesh.vertices, triangles=mesh.triangles,
                        phi=traj.phi, mu=traj.mu)
    manifest = {
        "format": TRAJECTORY_FORMAT,
        "gamma": traj.gamma,
        "tau": traj.tau,
        "N": traj.n_steps,
        "mesh_hash": mesh.fingerprint,
        "n_dofs": traj.space.n_dofs,
        "meta": {k: v for k, v in traj.meta.items() if k != "newton_iterations"},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_trajectory(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != TRAJECTORY_FORMAT:
        raise ValueError(f"{path}: unsupported trajectory format {manifest.get('format')!r}")
    data = np.load(path.with_suffix(".npz"))
    mesh = Mesh(data["vertices"], data["triangles"])
    if mesh.fingerprint != manifest["mesh_hash"]:
        raise ValueError(f"{path}: mesh hash mismatch")
    space = FESpace(mesh)
    return Trajectory(space, manifest["tau"], manifest["gamma"], data["phi"], data["mu"], manifest["meta"])
