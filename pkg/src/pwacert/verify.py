"""Verification of a UIS barrier against the true nonlinear dynamics.

The barrier condition only matters on the zero level set, which splits into
facet patches: the part of a common-refinement cell where one member is
active and vanishes. On a patch the condition reads

    min_x  s^T f(x) + max_{u in U} s^T g(x) u   >= 0

(the inner maximum equals the minimum over Farkas multipliers ``lambda >= 0``
with ``A_u^T lambda = g(x)^T s`` of ``lambda^T c_u``). A negative minimum is a
counterexample; the surrogate mismatch there becomes a cell-local
uncertainty set and synthesis is repeated.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .dynamics import DynamicsModel
from .geometry import Polytope
from .lp import LpProblem, solve_lp
from .relu import PwaFunction
from .synthesis import SynthesisConfig, UncertaintyMap
from .uis import NoCertifiedMember, UisBarrier, uis_sweep

log = logging.getLogger(__name__)

VERIFY_TOL = 1e-9
PATCH_TOL = 1e-7
FD_STEP = 1e-6
# patches whose best value is this close to zero get the dense restart set
DENSIFY_BAND = 1e-3
DENSE_RESTARTS = 32

VERIFIED = "verified"
COUNTEREXAMPLE = "counterexample"
SOLVER_FAILURE = "solver_failure"


@dataclass
class FacetPatch:
    """``{x in X_j : h_k(x) = 0, h_k(x) >= h_l(x) for all l}``.

    ``cell_id`` holds the member cell indices that define product cell
    ``cell_index``; ``s`` and ``t`` are member ``k``'s piece on that cell.
    """

    cell_index: int
    cell_id: tuple
    member_id: int
    polytope: Polytope
    s: np.ndarray
    t: float
    alpha: float = 0.0  # > 0 marks an interior patch, where the objective adds alpha * h_k

    @property
    def interior(self) -> bool:
        return self.alpha > 0

    @property
    def vertices(self) -> np.ndarray:
        return self.polytope.vertices

    @property
    def barycenter(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def contains(self, X, tol: float = PATCH_TOL):
        X = np.atleast_2d(X)
        if self.interior:
            return self.polytope.contains(X, tol)
        on_plane = np.abs(X @ self.s + self.t) <= tol * max(1.0, float(np.linalg.norm(self.s)))
        return on_plane & self.polytope.contains(X, tol)

    def grid(self, count: int, seed: int = 0) -> np.ndarray:
        """Points on the patch: evenly spaced on a segment, quasi-random otherwise."""
        V = self.vertices
        if V.shape[0] == 2:
            w = np.linspace(0.0, 1.0, count)
            return (1 - w)[:, None] * V[0] + w[:, None] * V[1]
        return _dirichlet_points(V.shape[0], count, seed) @ V

    def to_dict(self) -> dict:
        return {
            "cell_index": self.cell_index,
            "cell": list(self.cell_id),
            "member": self.member_id,
            "vertices": self.vertices.tolist(),
            "s": self.s.tolist(),
            "t": self.t,
            "alpha": self.alpha,
        }


@dataclass
class VerificationOutcome:
    patch: FacetPatch
    phi_star: float
    witness: np.ndarray
    lambda_star: np.ndarray
    status: str
    mismatch: np.ndarray | None = None
    restarts: int = 0
    local_minima: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cell": list(self.patch.cell_id),
            "member": self.patch.member_id,
            "kind": "interior" if self.patch.interior else "facet",
            "phi_star": self.phi_star,
            "witness": self.witness.tolist(),
            "lambda": self.lambda_star.tolist(),
            "status": self.status,
            "restarts": self.restarts,
            "mismatch": None if self.mismatch is None else self.mismatch.tolist(),
        }


def facet_patches(b: UisBarrier) -> list[FacetPatch]:
    part = b.product_partition
    n = part.dim
    out = []
    for j, (cell, tag) in enumerate(zip(part.cells, part.tags)):
        V = cell.vertices
        S = np.array([b.members[k].barrier.A[c] for k, c in enumerate(tag)])
        T = np.array([b.members[k].barrier.a[c] for k, c in enumerate(tag)])
        H = V @ S.T + T  # (vertices, members)
        hbar = H.max(axis=1)
        if hbar.max() < -PATCH_TOL or hbar.min() > PATCH_TOL:
            continue
        for k in range(len(tag)):
            if H[:, k].max() < -PATCH_TOL or H[:, k].min() > PATCH_TOL or not np.any(S[k]):
                continue
            others = [l for l in range(len(tag)) if l != k]
            E = [cell.E, S[k][None], -S[k][None]]
            e = [cell.e, [T[k]], [-T[k]]]
            if others:
                E.append(S[k] - S[others])
                e.append(T[k] - T[others])
            q = Polytope(np.vstack(E), np.concatenate(e))
            q.__dict__["bounded"] = True
            if q.is_empty or q.affine_dim != n - 1:
                continue
            out.append(FacetPatch(j, tuple(int(c) for c in tag), k, q, S[k].copy(), float(T[k])))
    if not out:
        log.warning("barrier zero level set meets no cell; nothing to verify")
    return out


def interior_patches(b: UisBarrier) -> list[FacetPatch]:
    """``{x in X_j : h_k(x) >= 0, h_k(x) >= h_l(x)}``: where member ``k`` is active inside the set.

    Set invariance only needs the facets, but the CBF-QP controller is
    feasible at an interior point only if ``Phi(x) + alpha_bar(hbar(x)) >= 0``
    there too, which is what these patches check.
    """
    part = b.product_partition
    n = part.dim
    a_max = b.alpha_bar_fn.alpha_max
    out = []
    for j, (cell, tag) in enumerate(zip(part.cells, part.tags)):
        V = cell.vertices
        S = np.array([b.members[k].barrier.A[c] for k, c in enumerate(tag)])
        T = np.array([b.members[k].barrier.a[c] for k, c in enumerate(tag)])
        H = V @ S.T + T
        if H.max() <= PATCH_TOL:
            continue
        for k in range(len(tag)):
            if H[:, k].max() <= PATCH_TOL:
                continue
            others = [l for l in range(len(tag)) if l != k]
            E = [cell.E, S[k][None]]
            e = [cell.e, [T[k]]]
            if others:
                E.append(S[k] - S[others])
                e.append(T[k] - T[others])
            q = Polytope(np.vstack(E), np.concatenate(e))
            q.__dict__["bounded"] = True
            if q.is_empty or q.affine_dim != n:
                continue
            out.append(FacetPatch(j, tuple(int(c) for c in tag), k, q, S[k].copy(), float(T[k]), a_max))
    return out


# the verification objective


def support_terms(dyn: DynamicsModel, s: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``max_{u in U} s^T g(x) u`` for each row of ``X``."""
    X = np.atleast_2d(X)
    if dyn.m == 0:
        return np.zeros(X.shape[0])
    W = np.einsum("n,knm->km", s, dyn.g(X))
    box = dyn.input_box
    if box is not None:
        lo, hi = box
        return np.sum(np.where(W > 0, W * hi, W * lo), axis=1)
    return (W @ dyn.input_set.vertices.T).max(axis=1)


def phi(dyn: DynamicsModel, s: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Closed-form verification objective (``lambda`` eliminated)."""
    X = np.atleast_2d(X)
    return dyn.f(X) @ s + support_terms(dyn, s, X)


def farkas_value(dyn: DynamicsModel, s: np.ndarray, x) -> tuple[float, np.ndarray]:
    """Objective at fixed ``x`` with the multiplier program solved as an LP.

    ``min lambda^T c_u`` s.t. ``A_u^T lambda = g(x)^T s``, ``lambda >= 0``.
    """
    x = np.asarray(x, dtype=float)
    drift = float(dyn.f(x[None])[0] @ s)
    if dyn.m == 0:
        return drift, np.zeros(0)
    w = s @ dyn.g(x[None])[0]
    A_u, c_u = dyn.A_u, dyn.c_u
    sol = solve_lp(LpProblem(c_u, None, None, A_u.T, w, lb=np.zeros(A_u.shape[0])))
    if not sol.ok:
        return -np.inf, np.full(A_u.shape[0], np.nan)
    return drift + sol.objective, sol.x


def _dirichlet_points(k: int, count: int, seed: int) -> np.ndarray:
    """Quasi-uniform barycentric weights from a scrambled Sobol sequence."""
    if count == 0:
        return np.zeros((0, k))
    U = qmc.Sobol(d=k, scramble=True, seed=seed).random(count)
    G = -np.log(np.clip(U, 1e-12, 1.0))
    return G / G.sum(axis=1, keepdims=True)


def project_simplex(W: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex."""
    W = np.atleast_2d(W)
    k = W.shape[1]
    U = -np.sort(-W, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    idx = np.arange(1, k + 1)
    cond = U - css / idx > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(W.shape[0]), rho] / (rho + 1)
    return np.maximum(W - theta[:, None], 0.0)


def _fd_gradient(fun, X: np.ndarray, step: float) -> np.ndarray:
    S, n = X.shape
    P = np.repeat(X[:, None, :], 2 * n, axis=1)
    eye = np.eye(n) * step
    P[:, :n] += eye
    P[:, n:] -= eye
    vals = fun(P.reshape(-1, n)).reshape(S, 2 * n)
    return (vals[:, :n] - vals[:, n:]) / (2 * step)


def _descend(fun, V: np.ndarray, W: np.ndarray, iters: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Projected gradient with Armijo backtracking in barycentric coordinates."""
    W = project_simplex(W)
    X = W @ V
    F = fun(X)
    step = np.full(W.shape[0], 1.0)
    scale = max(1.0, float(np.abs(V).max()))
    for _ in range(iters):
        G = _fd_gradient(fun, X, FD_STEP * scale) @ V.T  # gradient in weight space
        active = np.ones(W.shape[0], dtype=bool)
        moved = np.zeros(W.shape[0], dtype=bool)
        trial_step = step * 2.0
        for _ in range(30):
            if not np.any(active):
                break
            Wn = project_simplex(W - trial_step[:, None] * G)
            Fn = fun(Wn @ V)
            decrease = np.einsum("ij,ij->i", G, W - Wn)
            ok = active & np.isfinite(Fn) & (Fn <= F - 1e-4 * decrease) & (decrease > 1e-15)
            W[ok], F[ok] = Wn[ok], Fn[ok]
            step[ok] = trial_step[ok]
            moved |= ok
            active &= ~ok & (decrease > 1e-15)
            trial_step = np.where(active, trial_step * 0.5, trial_step)
        X = W @ V
        if not np.any(moved):
            break
    return X, F


def verify_facet(
    dyn: DynamicsModel,
    patch: FacetPatch,
    restarts: int = 8,
    surrogate: PwaFunction | None = None,
    seed: int = 0,
) -> VerificationOutcome:
    """Multi-start local minimisation of the verification objective on one patch.

    Starts are the patch vertices, its barycenter and ``restarts`` Sobol
    points; when the best value is near zero the Sobol set is grown to
    ``DENSE_RESTARTS``. The mismatch is reported against ``surrogate`` when
    given.
    """
    V = patch.vertices
    k = V.shape[0]
    s = patch.s

    def fun(X):
        if patch.interior:
            return phi(dyn, s, X) + patch.alpha * (X @ s + patch.t)
        return phi(dyn, s, X)

    def run(n_sobol):
        W0 = np.vstack([np.eye(k), np.full((1, k), 1.0 / k), _dirichlet_points(k, n_sobol, seed)])
        X, F = _descend(fun, V, W0)
        return X, F, W0.shape[0]

    X, F, used = run(restarts)
    finite = np.isfinite(F)
    if finite.any() and F[finite].min() < DENSIFY_BAND and restarts < DENSE_RESTARTS:
        X2, F2, used2 = run(DENSE_RESTARTS)
        X, F, used = np.vstack([X, X2]), np.concatenate([F, F2]), used + used2
        finite = np.isfinite(F)
    if not finite.any():
        return VerificationOutcome(patch, -np.inf, patch.barycenter, np.zeros(0), SOLVER_FAILURE, restarts=used)
    best = int(np.argmin(np.where(finite, F, np.inf)))
    x_star = X[best]
    phi_star = float(F[best])
    _, lam = farkas_value(dyn, s, x_star)
    status = VERIFIED if phi_star >= -VERIFY_TOL else COUNTEREXAMPLE
    mismatch = None
    if status == COUNTEREXAMPLE and surrogate is not None:
        mismatch = dyn.closed_loop(x_star[None])[0] - surrogate.evaluate(x_star[None], tol=1e-7)[0]
    return VerificationOutcome(
        patch, phi_star, x_star, lam, status, mismatch, restarts=used,
        local_minima=sorted(float(v) for v in F[finite])[:5],
    )


def update_uncertainty(unc: UncertaintyMap, cell_id: int, e_star) -> UncertaintyMap:
    """Grow ``Delta_j`` to the box hull of itself and ``{d : |d| <= |e*|}``."""
    e = np.abs(np.asarray(e_star, dtype=float).ravel())
    if not np.all(np.isfinite(e)):
        raise ValueError("mismatch must be finite")
    old = unc.get(cell_id)
    if old is None and not np.any(e):
        return unc  # {0} is already the default
    lo, hi = -e, e
    if old is not None:
        olo, ohi = old.bbox
        lo, hi = np.minimum(lo, olo), np.maximum(hi, ohi)
        if np.all(lo >= olo) and np.all(hi <= ohi):
            return unc
    box = Polytope.box(lo, hi)
    box = Polytope(box.E, box.e, vertices=np.unique(box.vertices, axis=0))
    return unc.replace(cell_id, box)


def segment_hull_vertices(old_vertices, e_star) -> np.ndarray:
    """Generators of ``conv(Delta_j u {+e*, -e*})``, the alternative to the box."""
    e = np.asarray(e_star, dtype=float).ravel()
    V = np.zeros((1, e.size)) if old_vertices is None else np.atleast_2d(old_vertices)
    return np.unique(np.vstack([V, e, -e]), axis=0)


@dataclass
class Budgets:
    outer_iters: int = 8
    wall_clock_s: float | None = None
    restarts: int = 8
    workers: int = 1
    interior: bool = False  # also verify where the set's interior meets each cell


@dataclass
class CertifiedResult:
    barrier: UisBarrier
    unc: UncertaintyMap
    certified: bool
    outcomes: list
    synthesis: list
    report: dict


def verify_all(
    dyn, b: UisBarrier, surrogate=None, restarts: int = 8, workers: int = 1, interior: bool = False,
) -> list[VerificationOutcome]:
    patches = facet_patches(b) + (interior_patches(b) if interior else [])

    def run(p):
        return verify_facet(dyn, p, restarts, surrogate)

    if workers > 1 and len(patches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, patches))
    return [run(p) for p in patches]


def certify_nonlinear(
    dyn: DynamicsModel,
    surrogate: PwaFunction,
    cfg: SynthesisConfig,
    alpha_grid,
    budgets: Budgets | None = None,
    unc: UncertaintyMap | None = None,
) -> CertifiedResult:
    """Synthesize, verify on facet patches, grow local uncertainty, repeat.

    Raises ``NoCertifiedMember`` when the first sweep certifies nothing; a
    later sweep that loses every member ends the loop with the previous
    barrier, uncertified.
    """
    budgets = budgets or Budgets()
    unc = unc or UncertaintyMap()
    t_start = time.perf_counter()
    iterations = []
    uis_time = verify_time = 0.0
    b = outcomes = results = None
    certified = False
    for it in range(max(1, budgets.outer_iters)):
        t0 = time.perf_counter()
        try:
            b, results = uis_sweep(surrogate, surrogate.partition, alpha_grid, cfg, unc, budgets.workers)
        except NoCertifiedMember as exc:
            if b is None:
                raise
            # robust re-synthesis lost every member; keep the last barrier
            iterations.append({"iteration": it, "note": str(exc)})
            uis_time += time.perf_counter() - t0
            break
        t1 = time.perf_counter()
        outcomes = verify_all(dyn, b, surrogate, budgets.restarts, budgets.workers, budgets.interior)
        t2 = time.perf_counter()
        uis_time += t1 - t0
        verify_time += t2 - t1
        bad = [o for o in outcomes if o.status == COUNTEREXAMPLE]
        failed = [o for o in outcomes if o.status == SOLVER_FAILURE]
        iterations.append({
            "iteration": it,
            "members": b.alphas,
            "patches": len(outcomes),
            "counterexamples": len(bad),
            "solver_failures": len(failed),
            "uncertain_cells": unc.cells(),
            "uis_s": t1 - t0,
            "verify_s": t2 - t1,
        })
        log.info("outer iteration %d: %d patches, %d counterexamples", it, len(outcomes), len(bad))
        if not bad and not failed:
            certified = True
            break
        if not bad:
            break  # nothing to learn from solver failures alone
        updated = unc
        for o in bad:
            j = int(surrogate.partition.locate(o.witness[None])[0])
            if j < 0:
                j = int(surrogate.partition.locate(o.witness[None], tol=1e-7)[0])
            if j < 0 or o.mismatch is None:
                continue
            updated = update_uncertainty(updated, j, o.mismatch)
        if updated is unc:
            iterations[-1]["note"] = "counterexamples left every uncertainty set unchanged"
            break
        unc = updated
        if budgets.wall_clock_s is not None and time.perf_counter() - t_start > budgets.wall_clock_s:
            iterations[-1]["note"] = "wall-clock budget exhausted"
            break
    report = {
        "certified": certified,
        "outer_iterations": len(iterations),
        "iterations": iterations,
        "timings": {"uis_s": uis_time, "verification_s": verify_time, "total_s": time.perf_counter() - t_start},
    }
    return CertifiedResult(b, unc, certified, outcomes, results, report)
