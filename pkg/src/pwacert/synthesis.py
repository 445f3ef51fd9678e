"""Robust LP synthesis of a PWA barrier for PWA surrogate dynamics.

Decision variables are one affine barrier piece ``h_i(x) = s_i^T x + t_i``
per cell plus one slack per global vertex. Constraints, per (cell, vertex):

* boundary vertices:  ``h_i(v) - tau_b(v) <= -eps1``
* interior vertices:  ``h_i(v) + tau_int(v) >= eps2``
* barrier condition:  ``s_i^T (A_i v + a_i + delta) + alpha h_i(v) >= eps3``
  for every vertex ``delta`` of the cell's uncertainty set
* continuity:         ``h_i(v) == h_j(v)`` for every cell ``j`` containing ``v``

and the objective is the total slack. A zero boundary slack certifies the
super-level set of the surrogate; nonzero slacks drive cell refinement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sparse

from .geometry import GeometryError, Partition, Polytope, split_cell
from .lp import LpProblem, LpSolution, solve_lp
from .relu import PwaFunction

log = logging.getLogger(__name__)

NONZERO = 1e-6


@dataclass(frozen=True)
class SynthesisConfig:
    alpha: float = 0.05
    eps1: float = 1e-4
    eps2: float = 1e-4
    eps3: float = 1e-4
    max_refinements: int = 10
    max_cells: int = 1500
    lp_method: str = "highs"
    # "boundary": minimise boundary slack first, then total slack with the
    # boundary optimum held fixed; "equal": a single solve of the plain sum
    slack_priority: str = "boundary"

    def __post_init__(self):
        for name in ("alpha", "eps1", "eps2", "eps3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_refinements < 0:
            raise ValueError("max_refinements must be non-negative")
        if self.slack_priority not in ("boundary", "equal"):
            raise ValueError("slack_priority must be 'boundary' or 'equal'")

    def with_alpha(self, alpha: float) -> "SynthesisConfig":
        return replace(self, alpha=alpha)


class UncertaintyMap:
    """Per-cell additive uncertainty sets, keyed by surrogate cell index.

    Cells without an entry carry the degenerate set ``{0}``.
    """

    def __init__(self, sets: dict | None = None):
        self._sets = dict(sets or {})
        for j, p in self._sets.items():
            if not p.contains(np.zeros(p.dim), 1e-12):
                raise ValueError(f"uncertainty set of cell {j} does not contain the origin")

    def __contains__(self, j):
        return j in self._sets

    def get(self, j) -> Polytope | None:
        return self._sets.get(j)

    def cells(self) -> list:
        return sorted(self._sets)

    def vertices(self, j, n: int) -> np.ndarray:
        p = self._sets.get(j)
        return np.zeros((1, n)) if p is None else p.vertices

    def replace(self, j, p: Polytope) -> "UncertaintyMap":
        sets = dict(self._sets)
        sets[j] = p
        return UncertaintyMap(sets)

    def __len__(self):
        return len(self._sets)

    def to_dict(self) -> dict:
        return {str(j): p.to_dict() for j, p in sorted(self._sets.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintyMap":
        return cls({int(j): Polytope.from_dict(p) for j, p in d.items()})


@dataclass
class SynthesisLp:
    lp: LpProblem
    partition: Partition
    base_ids: np.ndarray  # surrogate cell behind each synthesis cell
    boundary_vertices: np.ndarray  # global vertex ids with a tau_b slack
    interior_vertices: np.ndarray  # global vertex ids with a tau_int slack
    n_cell_vars: int
    row_counts: dict
    barrier_rows: np.ndarray  # (cell, vertex, delta index) for each barrier row

    def split(self, z: np.ndarray):
        n1 = self.partition.dim + 1
        C = len(self.partition)
        pieces = z[: C * n1].reshape(C, n1)
        nb = self.boundary_vertices.size
        tau_b = z[C * n1: C * n1 + nb]
        tau_i = z[C * n1 + nb:]
        return pieces[:, :-1], pieces[:, -1], tau_b, tau_i


@dataclass
class SynthesisResult:
    barrier: PwaFunction
    alpha: float
    slack_boundary: np.ndarray
    slack_interior: np.ndarray
    boundary_vertices: np.ndarray
    interior_vertices: np.ndarray
    certified: bool
    objective: float
    lp_stats: dict
    refinements: int = 0
    events: list = field(default_factory=list)

    @property
    def partition(self) -> Partition:
        return self.barrier.partition

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "certified": self.certified,
            "objective": self.objective,
            "refinements": self.refinements,
            "barrier": self.barrier.to_dict(),
            "slack_boundary": self.slack_boundary.tolist(),
            "slack_interior": self.slack_interior.tolist(),
            "lp_stats": self.lp_stats,
            "events": list(self.events),
        }


def base_cell_ids(dyn_pwa: PwaFunction, part: Partition) -> np.ndarray:
    """Index of the surrogate cell containing each cell of a refinement."""
    if part is dyn_pwa.partition:
        return np.arange(len(part))
    ids = dyn_pwa.partition.locate(np.array([c.centroid for c in part.cells]), tol=1e-7)
    if np.any(ids < 0):
        raise GeometryError("partition is not a refinement of the surrogate partition")
    return ids


def build_lp(dyn_pwa: PwaFunction, part: Partition, cfg: SynthesisConfig, unc: UncertaintyMap | None = None) -> SynthesisLp:
    if len(part) == 0:
        raise ValueError("empty partition")
    unc = unc or UncertaintyMap()
    n = part.dim
    C = len(part)
    n1 = n + 1
    vt = part.vertex_table
    base = base_cell_ids(dyn_pwa, part)
    bnd = np.flatnonzero(vt.on_boundary)
    inn = np.flatnonzero(~vt.on_boundary)
    slack_col = np.full(vt.n_vertices, -1, dtype=int)
    slack_col[bnd] = C * n1 + np.arange(bnd.size)
    slack_col[inn] = C * n1 + bnd.size + np.arange(inn.size)
    nvar = C * n1 + vt.n_vertices

    rows, cols, vals, rhs = [], [], [], []
    barrier_rows = []
    r = 0
    counts = {"boundary": 0, "interior": 0, "barrier": 0, "continuity": 0}

    def add_block(coef_x, coef_t, cell, extra_col, extra_val, b):
        # rows: coef_x . s_cell + coef_t * t_cell (+ extra_val * z[extra_col]) <= b
        nonlocal r
        k = coef_x.shape[0]
        ridx = r + np.arange(k)
        c0 = cell * n1
        rows.append(np.repeat(ridx, n))
        cols.append(np.tile(c0 + np.arange(n), k))
        vals.append(coef_x.ravel())
        rows.append(ridx)
        cols.append(np.full(k, c0 + n))
        vals.append(np.broadcast_to(coef_t, (k,)).astype(float))
        if extra_col is not None:
            rows.append(ridx)
            cols.append(extra_col)
            vals.append(np.broadcast_to(extra_val, (k,)).astype(float))
        rhs.append(np.broadcast_to(b, (k,)).astype(float))
        r += k

    alpha = cfg.alpha
    for i in range(C):
        ids = vt.cell_vertices[i]
        V = vt.points[ids]
        isb = vt.on_boundary[ids]
        if np.any(isb):
            add_block(V[isb], 1.0, i, slack_col[ids[isb]], -1.0, -cfg.eps1)
            counts["boundary"] += int(isb.sum())
        if np.any(~isb):
            add_block(-V[~isb], -1.0, i, slack_col[ids[~isb]], -1.0, -cfg.eps2)
            counts["interior"] += int((~isb).sum())
        A_i, a_i = dyn_pwa.A[base[i]], dyn_pwa.a[base[i]]
        flow = V @ A_i.T + a_i
        deltas = unc.vertices(int(base[i]), n)
        for d_idx, delta in enumerate(deltas):
            coef = flow + delta + alpha * V
            add_block(-coef, -alpha, i, None, None, -cfg.eps3)
            barrier_rows.extend((i, int(k), d_idx) for k in ids)
            counts["barrier"] += V.shape[0]
    A_ub = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, nvar)
    )
    b_ub = np.concatenate(rhs)

    erows, ecols, evals = [], [], []
    q = 0
    for k, cells in enumerate(vt.containing):
        if cells.size < 2:
            continue
        v = vt.points[k]
        c0 = cells[0]
        for cj in cells[1:]:
            erows += [q] * (2 * n1)
            ecols += list(c0 * n1 + np.arange(n1)) + list(cj * n1 + np.arange(n1))
            evals += list(v) + [1.0] + list(-v) + [-1.0]
            q += 1
    counts["continuity"] = q
    A_eq = sparse.csr_matrix((evals, (erows, ecols)), shape=(q, nvar)) if q else None

    c = np.zeros(nvar)
    c[C * n1:] = 1.0
    lb = np.full(nvar, -np.inf)
    lb[C * n1:] = 0.0
    names = []
    for i in range(C):
        names += [f"s{i}_{j}" for j in range(n)] + [f"t{i}"]
    names += [f"tau_b{k}" for k in bnd] + [f"tau_int{k}" for k in inn]
    lp = LpProblem(c, A_ub, b_ub, A_eq, None if A_eq is None else np.zeros(q), lb=lb, var_names=names)
    return SynthesisLp(lp, part, base, bnd, inn, C * n1, counts, np.array(barrier_rows, dtype=int).reshape(-1, 3))


def solve_synthesis_lp(slp: SynthesisLp, cfg: SynthesisConfig) -> LpSolution:
    """Solve the barrier LP under the configured slack priority."""
    lp = slp.lp
    if cfg.slack_priority == "equal":
        return solve_lp(lp, method=cfg.lp_method)
    lo = slp.n_cell_vars
    hi = lo + slp.boundary_vertices.size
    c1 = np.zeros(lp.n_vars)
    c1[lo:hi] = 1.0
    first = solve_lp(replace(lp, c=c1), method=cfg.lp_method)
    if not first.ok:
        return first
    cap = sparse.csr_matrix((np.ones(hi - lo), (np.zeros(hi - lo, dtype=int), np.arange(lo, hi))), shape=(1, lp.n_vars))
    # headroom above the solver's feasibility tolerance; far below NONZERO
    bound = max(first.objective, 0.0) * (1.0 + 1e-6) + 1e-7
    second = solve_lp(
        replace(lp, A_ub=sparse.vstack([lp.A_ub, cap]).tocsr(), b_ub=np.append(lp.b_ub, bound), ub_names=[]),
        method=cfg.lp_method,
    )
    if not second.ok:
        log.warning("second-stage barrier LP %s; keeping the boundary-only solution", second.status)
        return first
    second.iterations += first.iterations
    second.solve_time += first.solve_time
    return second


def _cells_to_refine(slp: SynthesisLp, tau_b, tau_i) -> list[int]:
    vt = slp.partition.vertex_table
    bad_b = slp.boundary_vertices[tau_b > NONZERO]
    bad_i = slp.interior_vertices[tau_i > NONZERO]
    cells_b, cells_i = set(), set()
    for k in bad_b:
        cells_b.update(int(c) for c in vt.containing[k])
    for k in bad_i:
        cells_i.update(int(c) for c in vt.containing[k])
    # boundary offenders first
    return sorted(cells_b) + sorted(cells_i - cells_b)


def refinement_witness(cell: Polytope) -> np.ndarray:
    """Split point used by the refinement loop.

    Non-simplices are star-subdivided at their vertex mean; simplices are
    bisected at the midpoint of their longest edge. Keeping the refined cells
    simplicial matters: on a grid of boxes, a continuous barrier with one
    affine piece per box is additively separable, and axis bisection never
    leaves that class.
    """
    V = cell.vertices
    if V.shape[0] != cell.dim + 1:
        return cell.centroid
    d = np.linalg.norm(V[:, None, :] - V[None, :, :], axis=-1)
    a, b = np.unravel_index(np.argmax(d), d.shape)
    return 0.5 * (V[a] + V[b])


def _refine(part: Partition, cells: list[int], budget: int) -> tuple[Partition, int]:
    done = 0
    for cid in cells:
        if len(part) >= budget:
            break
        try:
            part = split_cell(part, cid, refinement_witness(part.cells[cid]))
            done += 1
        except GeometryError:
            continue
    return part, done


def synthesize(dyn_pwa: PwaFunction, part: Partition, cfg: SynthesisConfig, unc: UncertaintyMap | None = None) -> SynthesisResult:
    """Solve the barrier LP, refining offending cells while slacks stay nonzero."""
    unc = unc or UncertaintyMap()
    events = []
    total_iters, total_time = 0, 0.0
    refinements = 0
    last = None
    while True:
        slp = build_lp(dyn_pwa, part, cfg, unc)
        sol = solve_synthesis_lp(slp, cfg)
        total_time += sol.solve_time
        total_iters += sol.iterations
        if not sol.ok:
            events.append(f"LP status {sol.status} on {len(part)} cells; refining largest cells")
            log.warning(events[-1])
            if refinements >= cfg.max_refinements or len(part) >= cfg.max_cells:
                if last is None:
                    raise RuntimeError(f"barrier LP {sol.status} and refinement budget exhausted")
                events.append("budget exhausted; returning the last solved partition")
                slp, sol = last
                part = slp.partition
                break
            order = sorted(range(len(part)), key=lambda i: -part.cells[i].volume)
            part, _ = _refine(part, order[: max(1, len(part) // 10)], cfg.max_cells)
            refinements += 1
            continue
        last = (slp, sol)
        _, _, tau_b, tau_i = slp.split(sol.x)
        offenders = _cells_to_refine(slp, tau_b, tau_i)
        if not offenders or refinements >= cfg.max_refinements or len(part) >= cfg.max_cells:
            if offenders and refinements >= cfg.max_refinements:
                events.append("refinement budget reached with nonzero slacks")
            elif offenders:
                events.append(f"cell budget {cfg.max_cells} reached with nonzero slacks")
            break
        # polygons carry extra continuity rows on a single affine piece, so
        # every non-simplex cell is triangulated alongside the offenders
        marked = set(offenders)
        extra = [i for i, c in enumerate(part.cells) if i not in marked and c.vertices.shape[0] != part.dim + 1]
        part, done = _refine(part, offenders + extra, cfg.max_cells)
        if done == 0:
            events.append("no offending cell could be split")
            break
        refinements += 1
        log.info("alpha=%g refinement %d: %d cells", cfg.alpha, refinements, len(part))

    s, t, tau_b, tau_i = slp.split(sol.x)
    # the objective reported is the plain slack sum, whatever the priority
    objective = float(tau_b.sum() + tau_i.sum())
    barrier = PwaFunction(part, s, t)
    certified = bool(tau_b.sum() <= NONZERO)
    stats = {
        "iterations": total_iters,
        "solve_time": total_time,
        "n_vars": slp.lp.n_vars,
        "n_ub": slp.lp.n_ub,
        "n_eq": slp.lp.n_eq,
        "cells": len(part),
    }
    return SynthesisResult(
        barrier=barrier,
        alpha=cfg.alpha,
        slack_boundary=tau_b,
        slack_interior=tau_i,
        boundary_vertices=slp.boundary_vertices,
        interior_vertices=slp.interior_vertices,
        certified=certified,
        objective=objective,
        lp_stats=stats,
        refinements=refinements,
        events=events,
    )
