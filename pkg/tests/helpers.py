"""Shared test fixtures that are plain functions."""
import itertools

import numpy as np

from pwacert.geometry import Partition, Polytope


def grid_partition(lo, hi, k):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    n = lo.size
    edges = [np.linspace(lo[i], hi[i], k + 1) for i in range(n)]
    cells = []
    for idx in itertools.product(range(k), repeat=n):
        a = np.array([edges[i][j] for i, j in enumerate(idx)])
        b = np.array([edges[i][j + 1] for i, j in enumerate(idx)])
        cells.append(Polytope.box(a, b))
    return Partition(cells, Polytope.box(lo, hi))


STABLE = np.array([[0.0, 1.0], [-2.0, -3.0]])


def linear_pwa(A, part):
    """``xdot = A x`` written as a PWA field with one (identical) piece per cell."""
    from pwacert.relu import PwaFunction

    C = len(part)
    A = np.asarray(A, float)
    return PwaFunction(part, np.repeat(A[None], C, axis=0), np.zeros((C, A.shape[0])))


def stable_linear():
    """Factory used by CLI tests through ``system = "helpers:stable_linear"``."""
    from pwacert.dynamics import linear_system

    return linear_system(STABLE, Polytope.box([-np.pi, -np.pi], [np.pi, np.pi]), name="stable_linear")


def unstable_linear():
    from pwacert.dynamics import linear_system

    return linear_system(np.eye(2), Polytope.box([-1, -1], [1, 1]), name="unstable_linear")


def brute_force_vertices(A, b, c):
    """Minimum of ``c.x`` over ``Ax <= b`` by trying every basis of ``n`` rows."""
    m, n = A.shape
    best, best_x = np.inf, None
    subsets = np.array(list(itertools.combinations(range(m), n)))
    M = A[subsets]  # (k, n, n)
    rhs = b[subsets]
    ok = np.abs(np.linalg.det(M)) > 1e-9
    X = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
    feas = np.all(X @ A.T <= b + 1e-9 * (1 + np.abs(b)), axis=1)
    if feas.any():
        vals = X[feas] @ c
        k = int(np.argmin(vals))
        best, best_x = float(vals[k]), X[feas][k]
    return best, best_x


def random_bounded_lp(rng):
    """``c = -A^T y`` with ``y >= 0`` keeps the objective bounded below on any feasible set."""
    n = int(rng.integers(1, 9))
    m = int(rng.integers(n + 1, 21))
    A = rng.normal(size=(m, n))
    if rng.random() < 0.8:
        b = rng.uniform(0.1, 2.0, size=m)  # origin feasible
    else:
        b = rng.normal(size=m)  # sometimes infeasible
    y = rng.exponential(size=m) * (rng.random(m) < 0.6)
    c = -A.T @ y
    return A, b, c
