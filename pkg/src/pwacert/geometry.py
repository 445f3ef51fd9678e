"""Polytopes, partitions of a polytopic domain, and cell refinement.

A polytope is stored in halfspace form ``E x + e >= 0`` with unit-norm rows.
Vertices are enumerated exhaustively: every choice of ``n`` rows is solved as
a linear system and kept if the solution satisfies all rows. Cells in this
package are low-dimensional with few facets, so the combinatorial cost stays
small, and the result is easy to check against an independent oracle.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from .lp import LpProblem, solve_lp

TOL = 1e-9
# point-location tolerance covered by the bin index; larger tolerances scan
INDEX_MARGIN = 1e-6


class GeometryError(ValueError):
    pass


class Polytope:
    """Bounded convex polytope ``{x : E x + e >= 0}``.

    Rows are normalised to unit length on construction and exact duplicates
    are dropped. ``vertices`` may be supplied when already known; otherwise
    they are enumerated on first access.
    """

    def __init__(self, E, e, vertices=None):
        E = np.atleast_2d(np.asarray(E, dtype=float))
        e = np.asarray(e, dtype=float).ravel()
        if E.shape[0] != e.size:
            raise GeometryError("halfspace normals and offsets differ in length")
        self.dim = E.shape[1]
        self._infeasible = False
        norms = np.linalg.norm(E, axis=1)
        zero = norms <= 1e-14
        if np.any(e[zero] < -TOL):
            self._infeasible = True
        E, e, norms = E[~zero], e[~zero], norms[~zero]
        E = E / norms[:, None]
        e = e / norms
        if E.shape[0]:
            rows = np.round(np.column_stack([E, e]), 12)
            _, keep = np.unique(rows, axis=0, return_index=True)
            keep.sort()
            E, e = E[keep], e[keep]
        self.E = E
        self.e = e
        if vertices is not None:
            self.__dict__["vertices"] = np.asarray(vertices, dtype=float).reshape(-1, self.dim)

    # construction helpers

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo = np.asarray(lo, dtype=float).ravel()
        hi = np.asarray(hi, dtype=float).ravel()
        n = lo.size
        eye = np.eye(n)
        E = np.vstack([eye, -eye])
        e = np.concatenate([-lo, hi])
        corners = np.array(list(itertools.product(*zip(lo, hi))), dtype=float)
        p = cls(E, e, vertices=corners)
        p.__dict__["bounded"] = True
        return p

    @classmethod
    def from_vertices(cls, points) -> "Polytope":
        """Halfspace form of the convex hull of ``points`` (full-dimensional)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[1]
        if n == 1:
            lo, hi = pts.min(), pts.max()
            p = cls(np.array([[1.0], [-1.0]]), np.array([-lo, hi]), vertices=np.array([[lo], [hi]]))
        elif n == 2:
            verts = _convex_hull_2d(pts)
            if len(verts) < 3:
                raise GeometryError("points do not span a full-dimensional polygon")
            nxt = np.roll(verts, -1, axis=0)
            d = nxt - verts
            normals = np.column_stack([-d[:, 1], d[:, 0]])  # inward for counter-clockwise order
            offsets = -np.einsum("ij,ij->i", normals, verts)
            p = cls(normals, offsets, vertices=verts)
        else:
            hull = ConvexHull(pts)
            E, e = _merge_parallel(-hull.equations[:, :-1], -hull.equations[:, -1])
            p = cls(E, e, vertices=pts[np.unique(hull.vertices)])
        p.__dict__["bounded"] = True
        return p

    # basic queries

    @property
    def n_halfspaces(self) -> int:
        return self.E.shape[0]

    def slack(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.E.T + self.e

    def contains(self, X, tol: float = TOL):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if self.n_halfspaces == 0:
            res = np.ones(np.atleast_2d(X).shape[0], dtype=bool)
        else:
            res = np.all(self.slack(X) >= -tol, axis=1)
        return bool(res[0]) if single else res

    def intersect(self, other: "Polytope") -> "Polytope":
        q = Polytope(np.vstack([self.E, other.E]), np.concatenate([self.e, other.e]))
        if self._known_bounded or other._known_bounded:
            q.__dict__["bounded"] = True
        return q

    @property
    def _known_bounded(self) -> bool:
        return bool(self.__dict__.get("bounded", False))

    def with_halfspaces(self, E, e) -> "Polytope":
        E = np.atleast_2d(np.asarray(E, dtype=float))
        q = Polytope(np.vstack([self.E, E]), np.concatenate([self.e, np.ravel(e)]))
        if self._known_bounded:
            q.__dict__["bounded"] = True
        return q

    @cached_property
    def vertices(self) -> np.ndarray:
        return vertices_of(self)

    @cached_property
    def bounded(self) -> bool:
        return _is_bounded(self.E)

    @property
    def is_empty(self) -> bool:
        return self.vertices.shape[0] == 0

    @cached_property
    def centroid(self) -> np.ndarray:
        """Mean of the vertices (an interior point for full-dimensional cells)."""
        return self.vertices.mean(axis=0)

    @cached_property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        V = self.vertices
        return V.min(axis=0), V.max(axis=0)

    @cached_property
    def affine_dim(self) -> int:
        V = self.vertices
        if V.shape[0] == 0:
            return -1
        if V.shape[0] == 1:
            return 0
        return int(np.linalg.matrix_rank(V[1:] - V[0], tol=1e-9))

    @cached_property
    def volume(self) -> float:
        V = self.vertices
        n = self.dim
        if V.shape[0] <= n or self.affine_dim < n:
            return 0.0
        if n == 1:
            return float(V.max() - V.min())
        if n == 2:
            return _polygon_area(_convex_hull_2d(V))
        return float(ConvexHull(V).volume)

    def chebyshev_radius(self) -> float:
        """Radius of the largest inscribed ball (0 for lower-dimensional sets)."""
        n = self.dim
        c = np.zeros(n + 1)
        c[-1] = -1.0
        A = np.column_stack([-self.E, np.ones(self.n_halfspaces)])
        lb = np.full(n + 1, -np.inf)
        lb[-1] = 0.0
        sol = solve_lp(LpProblem(c, A, self.e, lb=lb, ub=np.full(n + 1, 1e6)))
        return float(sol.x[-1]) if sol.ok else 0.0

    def facet_rows(self) -> np.ndarray:
        """Indices of rows that support an (n-1)-dimensional face."""
        V = self.vertices
        n = self.dim
        keep = []
        if V.shape[0] == 0:
            return np.array([], dtype=int)
        S = self.slack(V)
        for i in range(self.n_halfspaces):
            tight = V[np.abs(S[:, i]) <= 1e-8]
            if tight.shape[0] >= n and (n == 1 or np.linalg.matrix_rank(tight[1:] - tight[0], tol=1e-9) == n - 1):
                keep.append(i)
        return np.array(keep, dtype=int)

    def reduced(self) -> "Polytope":
        """Copy keeping only facet-defining rows (full-dimensional polytopes)."""
        rows = self.facet_rows()
        if rows.size == self.n_halfspaces:
            return self
        q = Polytope(self.E[rows], self.e[rows], vertices=self.vertices)
        if self._known_bounded:
            q.__dict__["bounded"] = True
        return q

    # serialisation

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "halfspaces": np.column_stack([self.E, self.e]).tolist(),
            "vertices": self.vertices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Polytope":
        dim = int(d["dim"])
        H = np.asarray(d["halfspaces"], dtype=float).reshape(-1, dim + 1)
        verts = d.get("vertices")
        p = cls(H[:, :dim], H[:, dim], vertices=None if verts is None else np.asarray(verts, dtype=float).reshape(-1, dim))
        if verts:
            p.__dict__["bounded"] = True  # only bounded polytopes have a finite vertex list
        return p

    def __repr__(self):
        return f"Polytope(dim={self.dim}, halfspaces={self.n_halfspaces})"


def vertices_of(p: Polytope) -> np.ndarray:
    """Vertices of ``p`` as an ``(k, n)`` array; empty for an empty polytope."""
    n = p.dim
    if p._infeasible:
        return np.zeros((0, n))
    if n == 0:
        return np.zeros((1, 0))
    E, e = p.E, p.e
    k = E.shape[0]
    if k < n or not p.bounded:
        raise GeometryError("unbounded polytope")
    combos = np.array(list(itertools.combinations(range(k), n)), dtype=int)
    pts = []
    for chunk in np.array_split(combos, max(1, combos.shape[0] // 20000 + 1)):
        M = E[chunk]
        rhs = -e[chunk]
        det = np.linalg.det(M)
        ok = np.abs(det) > 1e-12
        if not np.any(ok):
            continue
        X = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
        feas = np.all(X @ E.T + e >= -TOL, axis=1)
        pts.append(X[feas])
    if not pts:
        return np.zeros((0, n))
    X = np.vstack(pts)
    return _dedup(X, TOL)


def _is_bounded(E: np.ndarray) -> bool:
    n = E.shape[1]
    if E.shape[0] == 0 or np.linalg.matrix_rank(E) < n:
        return False
    # unbounded iff some direction d has E d >= 0 with sum(E d) = 1
    lp = LpProblem(np.zeros(n), -E, np.zeros(E.shape[0]), E.sum(axis=0)[None, :], [1.0])
    return solve_lp(lp).status == "infeasible"


def _dedup(X: np.ndarray, tol: float) -> np.ndarray:
    if X.shape[0] <= 1:
        return X
    tree = cKDTree(X)
    pairs = tree.query_pairs(r=max(tol, 1e-12) * 10, output_type="ndarray")
    parent = np.arange(X.shape[0])

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(X.shape[0])])
    return X[np.unique(roots)]


def _merge_parallel(E, e):
    norms = np.linalg.norm(E, axis=1)
    E = E / norms[:, None]
    e = e / norms
    rows = np.round(np.column_stack([E, e]), 9)
    _, keep = np.unique(rows, axis=0, return_index=True)
    keep.sort()
    return E[keep], e[keep]


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    P = _dedup(np.asarray(pts, dtype=float), TOL)
    P = P[np.lexsort((P[:, 1], P[:, 0]))]
    if P.shape[0] <= 2:
        return P

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in P:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 1e-12:
            lower.pop()
        lower.append(p)
    for p in P[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 1e-12:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _polygon_area(V: np.ndarray) -> float:
    x, y = V[:, 0], V[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


# partitions


@dataclass(frozen=True)
class VertexTable:
    points: np.ndarray  # (V, n) deduplicated global vertices
    on_boundary: np.ndarray  # (V,) bool, vertex lies on the domain boundary
    cell_vertices: tuple  # per cell: global ids of its extreme vertices
    containing: tuple  # per vertex: ids of every cell containing it

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]


class Partition:
    """Cells with disjoint interiors covering a polytopic domain.

    ``tags`` carry per-cell provenance (for instance the index of the
    surrogate region a refined cell came from) and survive ``split_cell``.
    """

    def __init__(self, cells, domain: Polytope, tags=None):
        self.cells = tuple(cells)
        self.domain = domain
        self.tags = tuple(range(len(self.cells))) if tags is None else tuple(tags)
        if len(self.tags) != len(self.cells):
            raise GeometryError("one tag per cell required")

    def __len__(self):
        return len(self.cells)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @cached_property
    def vertex_table(self) -> VertexTable:
        return _build_vertex_table(self)

    @cached_property
    def boundary_cell_ids(self) -> tuple:
        vt = self.vertex_table
        return tuple(i for i, ids in enumerate(vt.cell_vertices) if np.any(vt.on_boundary[ids]))

    @cached_property
    def _bboxes(self):
        lo = np.array([c.bbox[0] for c in self.cells])
        hi = np.array([c.bbox[1] for c in self.cells])
        return lo, hi

    @cached_property
    def _index(self):
        """Uniform bin grid over the domain with flattened per-bin candidate lists.

        Each bin lists, in ascending order, the cells whose bounding box
        (grown by ``INDEX_MARGIN``) meets it; halfspaces are padded to a
        common row count with always-satisfied rows.
        """
        lo, hi = self.domain.bbox
        n = self.dim
        per_axis = max(1, min(128, int(np.ceil((8.0 * len(self.cells)) ** (1.0 / n)))))
        width = np.where(hi > lo, (hi - lo) / per_axis, 1.0)
        clo, chi = self._bboxes
        b_lo = np.clip(np.floor((clo - INDEX_MARGIN - lo) / width).astype(int), 0, per_axis - 1)
        b_hi = np.clip(np.floor((chi + INDEX_MARGIN - lo) / width).astype(int), 0, per_axis - 1)
        strides = per_axis ** np.arange(n)
        bins = [[] for _ in range(per_axis ** n)]
        for i in range(len(self.cells)):
            ranges = [range(a, b + 1) for a, b in zip(b_lo[i], b_hi[i])]
            for idx in itertools.product(*ranges):
                bins[int(np.dot(idx, strides))].append(i)
        count = np.array([len(b) for b in bins], dtype=int)
        start = np.concatenate([[0], np.cumsum(count)[:-1]])
        flat = np.array([i for b in bins for i in b], dtype=int)
        R = max(c.n_halfspaces for c in self.cells)
        E = np.zeros((len(self.cells), R, n))
        e = np.full((len(self.cells), R), np.inf)
        for i, c in enumerate(self.cells):
            E[i, : c.n_halfspaces] = c.E
            e[i, : c.n_halfspaces] = c.e
        return lo, width, per_axis, strides, start, count, flat, E, e

    def locate(self, X, tol: float = TOL) -> np.ndarray:
        """Lowest index of a cell containing each point, ``-1`` when none does."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        N = X.shape[0]
        if not self.cells or N == 0:
            return np.full(N, -1, dtype=int)
        if tol > INDEX_MARGIN:
            return self._locate_scan(X, tol)
        lo, width, per_axis, strides, start, count, flat, E, e = self._index
        bins = np.clip(np.floor((X - lo) / width).astype(int), 0, per_axis - 1) @ strides
        k = count[bins]
        owner = np.repeat(np.arange(N), k)
        first = np.repeat(start[bins], k)
        offset = np.arange(owner.size) - np.repeat(np.cumsum(k) - k, k)
        cand = flat[first + offset]
        S = np.einsum("krd,kd->kr", E[cand], X[owner]) + e[cand]
        ok = np.all(S >= -tol, axis=1)
        big = len(self.cells)
        best = np.full(N, big)
        np.minimum.at(best, owner[ok], cand[ok])
        return np.where(best < big, best, -1)

    def _locate_scan(self, X, tol):
        out = np.full(X.shape[0], -1, dtype=int)
        lo, hi = self._bboxes
        for i, cell in enumerate(self.cells):
            todo = out < 0
            if not np.any(todo):
                break
            cand = todo & np.all(X >= lo[i] - tol, axis=1) & np.all(X <= hi[i] + tol, axis=1)
            if np.any(cand):
                idx = np.flatnonzero(cand)
                out[idx[cell.contains(X[idx], tol)]] = i
        return out

    def total_volume(self) -> float:
        return float(sum(c.volume for c in self.cells))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "domain": self.domain.to_dict(),
            "cells": [c.to_dict() for c in self.cells],
            "tags": [_tag_to_json(t) for t in self.tags],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        return cls(
            [Polytope.from_dict(c) for c in d["cells"]],
            Polytope.from_dict(d["domain"]),
            tags=[_tag_from_json(t) for t in d["tags"]],
        )


def _tag_to_json(t):
    if isinstance(t, tuple):
        return [_tag_to_json(x) for x in t]
    return t


def _tag_from_json(t):
    if isinstance(t, list):
        return tuple(_tag_from_json(x) for x in t)
    return t


def _build_vertex_table(part: Partition) -> VertexTable:
    n = part.dim
    per_cell = [c.vertices for c in part.cells]
    allv = np.vstack(per_cell) if per_cell else np.zeros((0, n))
    owner = np.concatenate([np.full(v.shape[0], i) for i, v in enumerate(per_cell)]) if per_cell else np.zeros(0, int)
    tree = cKDTree(allv)
    pairs = tree.query_pairs(r=TOL * 10, output_type="ndarray")
    parent = np.arange(allv.shape[0])

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in pairs:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(allv.shape[0])], dtype=int)
    uniq, gid = np.unique(roots, return_inverse=True)
    points = allv[uniq]
    cell_vertices = []
    start = 0
    for v in per_cell:
        cell_vertices.append(np.unique(gid[start:start + v.shape[0]]))
        start += v.shape[0]
    on_boundary = np.min(part.domain.slack(points), axis=1) <= TOL if points.shape[0] else np.zeros(0, bool)

    # incidence by containment, so hanging vertices on a neighbour's facet count
    containing = [set() for _ in range(points.shape[0])]
    for k, c in zip(gid, owner):
        containing[k].add(int(c))
    lo = np.array([c.bbox[0] for c in part.cells]) if part.cells else np.zeros((0, n))
    hi = np.array([c.bbox[1] for c in part.cells]) if part.cells else np.zeros((0, n))
    for i, cell in enumerate(part.cells):
        cand = np.all(points >= lo[i] - TOL, axis=1) & np.all(points <= hi[i] + TOL, axis=1)
        idx = np.flatnonzero(cand)
        if idx.size:
            for k in idx[cell.contains(points[idx], TOL)]:
                containing[k].add(i)
    return VertexTable(
        points=points,
        on_boundary=on_boundary,
        cell_vertices=tuple(cell_vertices),
        containing=tuple(np.array(sorted(s), dtype=int) for s in containing),
    )


def same_domain(a: Polytope, b: Polytope, tol: float = 1e-7) -> bool:
    Va, Vb = a.vertices, b.vertices
    if Va.shape != Vb.shape:
        return False
    return bool(np.all(b.contains(Va, tol)) and np.all(a.contains(Vb, tol)))


def product_partition(p1: Partition, p2: Partition) -> Partition:
    """Common refinement: every full-dimensional intersection of a p1 and a p2 cell.

    Tags of the result are ``(i, j)`` pairs of the intersected cell indices.
    """
    if not same_domain(p1.domain, p2.domain):
        raise GeometryError("partitions cover different domains")
    lo1, hi1 = p1._bboxes
    lo2, hi2 = p2._bboxes
    cells, tags = [], []
    for i, a in enumerate(p1.cells):
        overlap = np.all(lo2 <= hi1[i] + TOL, axis=1) & np.all(hi2 >= lo1[i] - TOL, axis=1)
        for j in np.flatnonzero(overlap):
            b = p2.cells[j]
            # a facet of either cell with the other cell strictly outside separates them
            if np.any(np.all(a.slack(b.vertices) <= 1e-12, axis=0)) or np.any(np.all(b.slack(a.vertices) <= 1e-12, axis=0)):
                continue
            q = a.intersect(b)
            if q.is_empty or q.affine_dim < q.dim or q.volume <= 1e-12:
                continue
            cells.append(q.reduced())
            tags.append((i, int(j)))
    return Partition(cells, p1.domain, tags)


def split_cell(part: Partition, cell_id: int, witness=None) -> Partition:
    """Replace one cell by subcells covering it.

    Without a witness the cell is bisected across its longest bounding-box
    axis through the vertex barycenter. With a witness it is star-subdivided:
    one pyramid from the witness over each facet not containing it.
    The first subcell keeps ``cell_id``; the rest are appended.
    """
    if not 0 <= cell_id < len(part):
        raise GeometryError(f"no cell {cell_id}")
    cell = part.cells[cell_id]
    n = cell.dim
    if witness is None:
        lo, hi = cell.bbox
        axis = int(np.argmax(hi - lo))
        cut = float(cell.centroid[axis])
        normal = np.zeros(n)
        normal[axis] = 1.0
        subs = [cell.with_halfspaces(-normal, cut), cell.with_halfspaces(normal, -cut)]
    else:
        w = np.asarray(witness, dtype=float).ravel()
        if not cell.contains(w, 1e-7):
            raise GeometryError("witness outside the cell")
        subs = []
        V = cell.vertices
        S = cell.slack(V)
        for r in cell.facet_rows():
            if abs(cell.slack(w)[0, r]) <= 1e-9:
                continue
            facet = V[np.abs(S[:, r]) <= 1e-8]
            subs.append(Polytope.from_vertices(np.vstack([facet, w])))
    subs = [s.reduced() for s in subs if not s.is_empty and s.affine_dim == n]
    if len(subs) < 2 or min(s.volume for s in subs) < 1e-12:
        raise GeometryError("degenerate refinement")
    cells = list(part.cells)
    tags = list(part.tags)
    cells[cell_id] = subs[0]
    cells.extend(subs[1:])
    tags.extend([part.tags[cell_id]] * (len(subs) - 1))
    return Partition(cells, part.domain, tags)
