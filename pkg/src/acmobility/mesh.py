"""Conforming triangulations of axis-aligned rectangles with edge topology."""
from __future__ import annotations

import hashlib
from functools import cached_property

import numpy as np

__all__ = ["Mesh", "build_structured_mesh", "mesh_metrics", "write_mesh", "read_mesh"]


class Mesh:
    """Triangle mesh with vertex coordinates, CCW triangles and edge bookkeeping.

    Local edge ``k`` of a triangle joins local vertices ``k`` and ``(k+1) % 3``.
    For every interior edge the stored unit normal points from the triangle
    with the lower index to the one with the higher index; boundary normals
    point outward.
    """

    def __init__(self, vertices, triangles):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise ValueError("vertices must have shape (nv, 2)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must have shape (nt, 3)")
        area2 = _signed_area2(vertices, triangles)
        flip = area2 < 0
        if np.any(flip):
            triangles = triangles.copy()
            triangles[flip, 1], triangles[flip, 2] = triangles[flip, 2], triangles[flip, 1].copy()
            area2 = np.abs(area2)
        if np.any(area2 <= 0):
            raise ValueError("degenerate triangle in mesh")
        self.vertices = vertices
        self.triangles = triangles
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)
        self.areas = 0.5 * area2
        self._build_edges()

    def _build_edges(self):
        t = self.triangles
        nt = len(t)
        local = np.stack([t, np.roll(t, -1, axis=1)], axis=2).reshape(-1, 2)
        key = np.sort(local, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        self.edges = edges
        self.tri_edges = inverse.reshape(nt, 3)

        owner = np.repeat(np.arange(nt), 3)
        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.lexsort((owner, inverse))
        inv_sorted = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = inv_sorted[1:] != inv_sorted[:-1]
        edge_tris[inv_sorted[first], 0] = owner[order][first]
        second = ~first
        if np.any(np.bincount(inv_sorted, minlength=len(edges)) > 2):
            raise ValueError("non-manifold mesh: edge shared by more than two triangles")
        edge_tris[inv_sorted[second], 1] = owner[order][second]
        self.edge_tris = edge_tris
        self.interior_edges = np.flatnonzero(edge_tris[:, 1] >= 0)
        self.boundary_edges = np.flatnonzero(edge_tris[:, 1] < 0)

        p = self.vertices
        d = p[edges[:, 1]] - p[edges[:, 0]]
        self.edge_lengths = np.hypot(d[:, 0], d[:, 1])
        normals = np.column_stack([d[:, 1], -d[:, 0]]) / self.edge_lengths[:, None]
        # orient away from the first owner (lower-index triangle for interior edges)
        centroid = p[t].mean(axis=1)
        mid = 0.5 * (p[edges[:, 0]] + p[edges[:, 1]])
        outward = np.einsum("ij,ij->i", normals, mid - centroid[edge_tris[:, 0]])
        normals[outward < 0] *= -1.0
        self.edge_normals = normals

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_edges(self):
        return len(self.edges)

    @cached_property
    def diameters(self):
        """Longest edge of each triangle."""
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @cached_property
    def area(self):
        return float(np.sum(self.areas))

    @cached_property
    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]

    def refine(self):
        """Uniform red refinement: every triangle is split into four."""
        nv = self.n_vertices
        p = self.vertices
        mids = 0.5 * (p[self.edges[:, 0]] + p[self.edges[:, 1]])
        verts = np.vstack([p, mids])
        t = self.triangles
        m = self.tri_edges + nv  # m[:, k] sits on edge (v_k, v_{k+1})
        tris = np.concatenate([
            np.column_stack([t[:, 0], m[:, 0], m[:, 2]]),
            np.column_stack([m[:, 0], t[:, 1], m[:, 1]]),
            np.column_stack([m[:, 2], m[:, 1], t[:, 2]]),
            np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
        ])
        return Mesh(verts, tris)

    def locate(self, points, tol=1e-12):
        """Triangle index and barycentric coordinates of each point (-1 if outside)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        p = self.vertices
        t = self.triangles
        a, b, c = p[t[:, 0]], p[t[:, 1]], p[t[:, 2]]
        det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
        owner = np.full(len(points), -1, dtype=np.int64)
        bary = np.zeros((len(points), 3))
        for i, x in enumerate(points):
            l1 = ((x[0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (x[1] - a[:, 1])) / det
            l2 = ((b[:, 0] - a[:, 0]) * (x[1] - a[:, 1]) - (x[0] - a[:, 0]) * (b[:, 1] - a[:, 1])) / det
            l0 = 1.0 - l1 - l2
            inside = np.flatnonzero((l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol))
            if len(inside):
                k = inside[0]
                owner[i] = k
                bary[i] = l0[k], l1[k], l2[k]
        return owner, bary


def _signed_area2(vertices, triangles):
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])


def build_structured_mesh(bounds=(-2.0, 2.0, -2.0, 2.0), n=16, pattern="alternating"):
    """Triangulate the rectangle ``(x0, x1) x (y0, y1)`` with ``n`` cells per axis.

    ``pattern`` is ``"alternating"`` (diagonal direction flips in a checkerboard
    fashion) or ``"right"`` (all diagonals parallel). Vertices are numbered
    row by row starting at the lower-left corner.
    """
    x0, x1, y0, y1 = map(float, bounds)
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {bounds!r}")
    if pattern not in ("alternating", "right"):
        raise ValueError(f"unknown pattern {pattern!r}")
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    flip = ((i + j) % 2 == 1) if pattern == "alternating" else np.zeros_like(i, dtype=bool)
    tri_a = np.where(flip[:, None], np.column_stack([v00, v10, v01]), np.column_stack([v00, v10, v11]))
    tri_b = np.where(flip[:, None], np.column_stack([v10, v11, v01]), np.column_stack([v00, v11, v01]))
    tris = np.empty((2 * len(i), 3), dtype=np.int64)
    tris[0::2] = tri_a
    tris[1::2] = tri_b
    return Mesh(verts, tris)


def mesh_metrics(mesh):
    """Return ``(h_min, h_max)`` over triangle diameters."""
    h = mesh.diameters
    return float(h.min()), float(h.max())


MESH_HEADER = "# acmobility mesh v1"


def write_mesh(mesh, path):
    """Plain-text dump: header, counts, vertex lines ``x y``, triangle lines ``i j k``."""
    with open(path, "w") as fh:
        fh.write(f"{MESH_HEADER}\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")


def read_mesh(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != MESH_HEADER:
            raise ValueError(f"{path}: not a mesh file (header {header!r})")
        nv, nt = map(int, fh.readline().split())
        lines = fh.read().split("\n")
    verts = np.loadtxt(lines[:nv], ndmin=2)
    tris = np.loadtxt(lines[nv:nv + nt], dtype=np.int64, ndmin=2)
    if verts.shape != (nv, 2) or tris.shape != (nt, 3):
        raise ValueError(f"{path}: expected {nv} vertices and {nt} triangles")
    return Mesh(verts, tris)
