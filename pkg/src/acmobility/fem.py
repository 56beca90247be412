"""Quadratic Lagrange finite elements on triangle meshes.

Fields are carried around either as :class:`FEFunction` coefficient vectors or
as arrays of point values with shape ``(n_triangles, n_points)`` tied to a
:class:`Rule` (quadrature or sampling points in barycentric coordinates).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import roots_jacobi

from .mesh import Mesh

__all__ = [
    "DEGREE",
    "Rule",
    "triangle_rule",
    "sample_rule",
    "edge_rule",
    "FESpace",
    "FEFunction",
    "SingularMatrixError",
    "assemble_mass",
    "assemble_stiffness",
    "l2_project",
    "norm_lp",
    "dual_norm_neg1",
    "solve_sparse",
]

DEGREE = 2


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a sparse factorization hits an exactly singular pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class Rule:
    """Points on the reference triangle in barycentric coordinates.

    ``weights`` sum to the reference area 1/2; ``degree`` is the polynomial
    exactness (``-1`` for pure sampling sets).
    """

    bary: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self):
        return len(self.weights)


def triangle_rule(n=5):
    """Collapsed Gauss rule with ``n*n`` points, exact up to degree ``2n - 1``."""
    # x along Gauss-Legendre, y collapsed with Gauss-Jacobi(1, 0) weight (1 - s)
    s, ws = roots_jacobi(n, 1.0, 0.0)  # weight (1 - s) on [-1, 1]
    r, wr = np.polynomial.legendre.leggauss(n)
    s01 = 0.5 * (s + 1.0)
    r01 = 0.5 * (r + 1.0)
    Y = np.repeat(s01, n)
    X = np.tile(r01, n) * (1.0 - Y)
    W = np.repeat(ws, n) * np.tile(wr, n) / 8.0
    bary = np.column_stack([1.0 - X - Y, X, Y])
    return Rule(bary, W, 2 * n - 1)


def sample_rule(order=4):
    """Quadrature points plus the barycentric lattice of the given order."""
    q = triangle_rule()
    pts = [(i / order, j / order) for j in range(order + 1) for i in range(order + 1 - j)]
    pts = np.array(pts)
    lattice = np.column_stack([1.0 - pts.sum(axis=1), pts])
    bary = np.vstack([q.bary, lattice])
    return Rule(bary, np.zeros(len(bary)), -1)


def edge_rule(n=3):
    """Gauss-Legendre on [0, 1]; returns ``(points, weights)``, exact to degree ``2n - 1``."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _p2_values(bary):
    l0, l1, l2 = bary.T
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])


def _p2_dlambda(bary):
    """Derivatives of the six P2 shape functions w.r.t. the barycentric coordinates."""
    l0, l1, l2 = bary.T
    z = np.zeros_like(l0)
    d = np.empty((len(bary), 6, 3))
    d[:, 0] = np.column_stack([4 * l0 - 1, z, z])
    d[:, 1] = np.column_stack([z, 4 * l1 - 1, z])
    d[:, 2] = np.column_stack([z, z, 4 * l2 - 1])
    d[:, 3] = np.column_stack([4 * l1, 4 * l0, z])
    d[:, 4] = np.column_stack([z, 4 * l2, 4 * l1])
    d[:, 5] = np.column_stack([4 * l2, z, 4 * l0])
    return d


# local node 3 + k sits on local edge k = (v_k, v_{k+1})
_EDGE_NODES = ((0, 1), (1, 2), (2, 0))


class FESpace:
    """Continuous piecewise quadratic Lagrange space on ``mesh``.

    Global numbering: vertex dofs first, then one dof per edge midpoint.
    """

    degree = DEGREE
    _chunk = 4096

    def __init__(self, mesh: Mesh, rule: Rule | None = None):
        self.mesh = mesh
        self.rule = rule or triangle_rule()
        self.n_dofs = mesh.n_vertices + mesh.n_edges
        self.cell_dofs = np.hstack([mesh.triangles, mesh.tri_edges + mesh.n_vertices])
        self.cell_dofs.setflags(write=False)
        p = mesh.vertices
        mids = 0.5 * (p[mesh.edges[:, 0]] + p[mesh.edges[:, 1]])
        self.nodes = np.vstack([p, mids])

        t = mesh.triangles
        a, b, c = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
        det = 2.0 * mesh.areas
        # gradients of barycentric coordinates, shape (nt, 3, 2)
        g = np.empty((len(t), 3, 2))
        g[:, 0] = np.column_stack([b[:, 1] - c[:, 1], c[:, 0] - b[:, 0]]) / det[:, None]
        g[:, 1] = np.column_stack([c[:, 1] - a[:, 1], a[:, 0] - c[:, 0]]) / det[:, None]
        g[:, 2] = np.column_stack([a[:, 1] - b[:, 1], b[:, 0] - a[:, 0]]) / det[:, None]
        self.grad_bary = g

    # -- geometry at rule points -------------------------------------------------

    def points(self, rule=None):
        """Physical coordinates of rule points, shape ``(nt, nq, 2)``."""
        rule = rule or self.rule
        corners = self.mesh.vertices[self.mesh.triangles]  # (nt, 3, 2)
        return np.einsum("qk,ekd->eqd", rule.bary, corners)

    def weights(self, rule=None):
        """Physical quadrature weights, shape ``(nt, nq)``."""
        rule = rule or self.rule
        return 2.0 * self.mesh.areas[:, None] * rule.weights[None, :]

    @cached_property
    def _basis(self):
        return _p2_values(self.rule.bary)

    @cached_property
    def _mass_kernel(self):
        phi = self._basis
        return phi[:, :, None] * phi[:, None, :]  # (nq, 6, 6), exactly symmetric

    @cached_property
    def laplacian_coeffs(self):
        """Per-cell Laplacian of each local shape function, shape ``(nt, 6)``."""
        g = self.grad_bary
        gg = np.einsum("eki,eli->ekl", g, g)
        out = np.empty((len(g), 6))
        for i in range(3):
            out[:, i] = 4.0 * gg[:, i, i]
        for k, (i, j) in enumerate(_EDGE_NODES):
            out[:, 3 + k] = 8.0 * gg[:, i, j]
        return out

    # -- evaluation --------------------------------------------------------------

    def local(self, coeffs):
        return np.asarray(coeffs)[self.cell_dofs]

    def eval(self, coeffs, rule=None):
        """Values at rule points, shape ``(nt, nq)``."""
        basis = self._basis if rule is None else _p2_values(rule.bary)
        return self.local(coeffs) @ basis.T

    def grad(self, coeffs, rule=None):
        """Gradients at rule points, shape ``(nt, nq, 2)``."""
        if rule is None or rule is self.rule:
            gphys = self._grad_basis
        else:
            gphys = np.einsum("qik,ekd->eqid", _p2_dlambda(rule.bary), self.grad_bary)
        return np.einsum("ei,eqid->eqd", self.local(coeffs), gphys, optimize=True)

    @cached_property
    def _grad_basis(self):
        # physical basis gradients at the default rule, (nt, nq, 6, 2)
        return np.einsum("qik,ekd->eqid", _p2_dlambda(self.rule.bary), self.grad_bary)

    def grad_at(self, coeffs, cells, bary):
        """Gradient of the restriction to ``cells[i]`` at barycentric point ``bary[i]``."""
        d = _p2_dlambda(np.atleast_2d(bary))  # (m, 6, 3)
        loc = self.local(coeffs)[cells]
        return np.einsum("mi,mik,mkd->md", loc, d, self.grad_bary[cells])

    def laplacian(self, coeffs):
        """Cellwise (constant) Laplacian of a P2 function, shape ``(nt,)``."""
        return np.einsum("ei,ei->e", self.local(coeffs), self.laplacian_coeffs)

    def interpolate(self, f):
        """Nodal interpolant of ``f(x, y)``."""
        return np.asarray(f(self.nodes[:, 0], self.nodes[:, 1]), dtype=float) * np.ones(self.n_dofs)

    def evaluate_at(self, coeffs, points):
        """Point evaluation (NaN outside the mesh)."""
        cells, bary = self.mesh.locate(points)
        out = np.full(len(cells), np.nan)
        ok = cells >= 0
        phi = _p2_values(bary[ok])
        out[ok] = np.einsum("mi,mi->m", self.local(coeffs)[cells[ok]], phi)
        return out

    def evaluation_matrix(self, points):
        """Sparse ``E`` with ``(E @ coeffs)[i] = u_h(points[i])``; raises if a point is outside."""
        cells, bary = self.mesh.locate(points)
        if np.any(cells < 0):
            raise ValueError(f"{int(np.sum(cells < 0))} evaluation point(s) outside the mesh")
        vals = _p2_values(bary)
        rows = np.repeat(np.arange(len(cells)), 6)
        return sp.csr_matrix((vals.ravel(), (rows, self.cell_dofs[cells].ravel())),
                             shape=(len(cells), self.n_dofs))

    # -- assembly ----------------------------------------------------------------

    @cached_property
    def _pattern(self):
        cd = self.cell_dofs
        n = self.n_dofs
        keys = (cd[:, :, None] * n + cd[:, None, :]).ravel()
        uniq, inverse = np.unique(keys, return_inverse=True)
        rows = uniq // n
        cols = uniq % n
        indptr = np.searchsorted(rows, np.arange(n + 1))
        return inverse.ravel(), cols.astype(np.int32), indptr.astype(np.int32)

    def _to_csr(self, local_mats):
        inverse, cols, indptr = self._pattern
        data = np.bincount(inverse, weights=local_mats.ravel(), minlength=len(cols))
        return sp.csr_matrix((data, cols, indptr), shape=(self.n_dofs, self.n_dofs))

    def mass(self, weight=None):
        w = self.weights()
        if weight is not None:
            w = w * np.broadcast_to(weight, w.shape)
        nq = self.rule.n_points
        loc = (w @ self._mass_kernel.reshape(nq, 36)).reshape(-1, 6, 6)
        return self._to_csr(loc)

    def stiffness(self):
        d = _p2_dlambda(self.rule.bary)
        w = self.weights()
        out = np.empty((self.mesh.n_triangles, 6, 6))
        for s in range(0, self.mesh.n_triangles, self._chunk):
            sl = slice(s, s + self._chunk)
            g = np.einsum("qik,ekd->eqid", d, self.grad_bary[sl])
            prod = np.einsum("eqid,eqjd->eqij", g, g)
            out[sl] = np.einsum("eq,eqij->eij", w[sl], prod)
        return self._to_csr(out)

    def load(self, values, rule=None):
        """Load vector ``<g, chi_i>`` from point values of ``g`` at quadrature points."""
        rule = rule or self.rule
        basis = self._basis if rule is self.rule else _p2_values(rule.bary)
        w = self.weights(rule) * np.broadcast_to(values, (self.mesh.n_triangles, rule.n_points))
        loc = w @ basis
        return np.bincount(self.cell_dofs.ravel(), weights=loc.ravel(), minlength=self.n_dofs)

    @cached_property
    def M(self):
        return self.mass()

    @cached_property
    def K(self):
        return self.stiffness()

    @cached_property
    def _h1_solver(self):
        return splu(sp.csc_matrix(self.K + self.M))

    @cached_property
    def _mass_solver(self):
        return splu(sp.csc_matrix(self.M))

    def solve_mass(self, rhs):
        return self._mass_solver.solve(np.asarray(rhs, dtype=float))

    def solve_h1(self, rhs):
        return self._h1_solver.solve(np.asarray(rhs, dtype=float))

    def function(self, coeffs=None):
        return FEFunction(self, np.zeros(self.n_dofs) if coeffs is None else np.asarray(coeffs, float))


@dataclass
class FEFunction:
    space: FESpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_dofs,):
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got {self.coeffs.shape}")

    def values(self, rule=None):
        return self.space.eval(self.coeffs, rule)

    def gradient(self, rule=None):
        return self.space.grad(self.coeffs, rule)

    def __call__(self, points):
        return self.space.evaluate_at(self.coeffs, points)


def assemble_mass(space: FESpace, weight=None):
    """Mass matrix ``M_ij = int weight chi_i chi_j``; ``weight`` is a scalar or point values."""
    return space.mass(weight)


def assemble_stiffness(space: FESpace):
    return space.stiffness()


def l2_project(f, space: FESpace):
    """L2-orthogonal projection of ``f(x, y)`` (or quadrature-point values) onto ``space``."""
    if callable(f):
        x = space.points()
        vals = f(x[..., 0], x[..., 1])
    else:
        vals = f
    rhs = space.load(vals)
    coeffs = solve_sparse(space.M, rhs, factor=space._mass_solver)
    return FEFunction(space, coeffs)


def norm_lp(space: FESpace, values, p, rule=None):
    """L^p norm of a field given by point values on ``rule`` (quadrature by default).

    ``p = inf`` takes the max over the supplied points; pass values on
    :func:`sample_rule` for the dense sampling set.
    """
    values = np.asarray(values, dtype=float)
    if p in (np.inf, "inf"):
        return float(np.max(np.abs(values))) if values.size else 0.0
    if p not in (1, 2, 3, 4, 6):
        raise ValueError(f"unsupported exponent p={p!r}")
    w = space.weights(rule)
    a = np.abs(values)
    return float(np.sum(w * a**p) ** (1.0 / p))


def dual_norm_neg1(space: FESpace, load):
    """Discrete H^{-1} norm: ``sqrt(l^T (K + M)^{-1} l)`` for a load vector ``l``."""
    load = np.asarray(load, dtype=float)
    if not np.any(load):
        return 0.0
    w = space.solve_h1(load)
    return float(np.sqrt(max(load @ w, 0.0)))


def solve_sparse(A, rhs, factor=None):
    """Direct sparse LU solve with a residual check.

    Raises :class:`SingularMatrixError` when the factorization breaks down and
    ``FloatingPointError`` when the residual exceeds ``1e-10 (1 + |rhs|_inf)``.
    """
    rhs = np.asarray(rhs, dtype=float)
    if factor is None:
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        try:
            factor = splu(A)
        except RuntimeError as exc:
            raise SingularMatrixError(f"LU factorization failed: {exc}", _pivot_from(exc)) from exc
        udiag = np.abs(factor.U.diagonal())
        scale = max(np.max(udiag), 1.0)
        bad = np.flatnonzero(udiag <= 1e-13 * scale)
        if len(bad):
            raise SingularMatrixError(
                f"matrix is numerically singular (pivot {int(bad[0])} ~ {udiag[bad[0]]:.2e})", int(bad[0])
            )
    x = factor.solve(rhs)
    res = np.max(np.abs(A @ x - rhs)) if rhs.size else 0.0
    tol = 1e-10 * (1.0 + np.max(np.abs(rhs), initial=0.0))
    if not np.isfinite(res) or res > tol:
        raise FloatingPointError(f"linear solve residual {res:.3e} exceeds {tol:.3e}")
    return x


def _pivot_from(exc):
    digits = "".join(ch if ch.isdigit() else " " for ch in str(exc)).split()
    return int(digits[-1]) if digits else None
