"""Linear programming: a dense two-phase tableau simplex and a HiGHS backend.

Problems are stated as

    min  c^T z   s.t.  A_ub z <= b_ub,  A_eq z == b_eq,  lb <= z <= ub

with ``lb = -inf`` marking a free variable. Infeasible and unbounded
problems are reported through ``LpSolution.status``; they never raise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

PIVOT_TOL = 1e-9
COST_TOL = 1e-9
FEAS_TOL = 1e-7
DEGENERATE_RUN = 50
REFACTOR_EVERY = 100
HARRIS_TOL = 1e-9

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"


@dataclass
class LpProblem:
    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    var_names: list[str] = field(default_factory=list)
    ub_names: list[str] = field(default_factory=list)
    eq_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_ub = _as_matrix(self.A_ub, n)
        self.b_ub = _as_vector(self.b_ub, self.A_ub.shape[0])
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0])
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds do not match the number of variables")
        for arr in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(arr.data if sp.issparse(arr) else arr)):
                raise ValueError("LP coefficients must be finite")

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_ub(self) -> int:
        return self.A_ub.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    def dump(self) -> str:
        """Plain-text listing of the problem, one row per line (MPS-like)."""
        names = self.var_names or [f"z{j}" for j in range(self.n_vars)]

        def expr(row):
            row = np.asarray(row.todense()).ravel() if sp.issparse(row) else row
            terms = [f"{v:+.12g} {names[j]}" for j, v in enumerate(row) if v != 0.0]
            return " ".join(terms) if terms else "0"

        lines = ["NAME pwacert", "OBJECTIVE", f"  min {expr(self.c)}", "ROWS"]
        for i in range(self.n_ub):
            tag = self.ub_names[i] if self.ub_names else f"ub{i}"
            lines.append(f"  {tag}: {expr(self.A_ub[i])} <= {self.b_ub[i]:.12g}")
        for i in range(self.n_eq):
            tag = self.eq_names[i] if self.eq_names else f"eq{i}"
            lines.append(f"  {tag}: {expr(self.A_eq[i])} = {self.b_eq[i]:.12g}")
        lines.append("BOUNDS")
        for j in range(self.n_vars):
            lines.append(f"  {self.lb[j]:.12g} <= {names[j]} <= {self.ub[j]:.12g}")
        lines.append("ENDATA")
        return "\n".join(lines) + "\n"


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int
    solve_time: float

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _as_matrix(A, n):
    if A is None:
        return np.zeros((0, n))
    if sp.issparse(A):
        if A.shape[1] != n:
            raise ValueError(f"constraint matrix has {A.shape[1]} columns, expected {n}")
        return sp.csr_matrix(A, dtype=float)
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A.reshape(1, -1) if A.size else np.zeros((0, n))
    if A.shape[1] != n:
        raise ValueError(f"constraint matrix has {A.shape[1]} columns, expected {n}")
    return A


def _as_vector(b, m):
    if b is None:
        return np.zeros(m)
    b = np.asarray(b, dtype=float).ravel()
    if b.size != m:
        raise ValueError("right-hand side does not match constraint rows")
    return b


def solve_lp(lp: LpProblem, method: str = "simplex", max_iter: int | None = None) -> LpSolution:
    """Solve ``lp`` with the embedded simplex (``"simplex"``) or HiGHS (``"highs"``)."""
    t0 = time.perf_counter()
    if method == "simplex":
        status, x, obj, it = _simplex(lp, max_iter)
    elif method == "highs":
        status, x, obj, it = _highs(lp)
    else:
        raise ValueError(f"unknown LP method {method!r}")
    return LpSolution(status, x, obj, it, time.perf_counter() - t0)


def _highs(lp: LpProblem):
    from scipy.optimize import linprog

    kwargs = dict(
        A_ub=lp.A_ub if lp.n_ub else None,
        b_ub=lp.b_ub if lp.n_ub else None,
        A_eq=lp.A_eq if lp.n_eq else None,
        b_eq=lp.b_eq if lp.n_eq else None,
        bounds=list(zip(np.where(np.isinf(lp.lb), None, lp.lb), np.where(np.isinf(lp.ub), None, lp.ub))),
    )
    it = 0
    # HiGHS occasionally stops with an unset status on large, degenerate
    # barrier LPs; another algorithm, or the same one without presolve,
    # then usually succeeds
    attempts = (("highs", {}), ("highs-ipm", {}), ("highs-ds", {"presolve": False}), ("highs-ipm", {"presolve": False}))
    for method, options in attempts:
        res = linprog(lp.c, method=method, options=options, **kwargs)
        it += int(getattr(res, "nit", 0) or 0)
        if res.status == 0:
            return OPTIMAL, np.asarray(res.x), float(res.fun), it
        if res.status == 2:
            return INFEASIBLE, None, np.inf, it
        if res.status == 3:
            return UNBOUNDED, None, -np.inf, it
    return ITERATION_LIMIT, None, np.nan, it


def _dense(A):
    return A.toarray() if sp.issparse(A) else A


def _simplex(lp: LpProblem, max_iter: int | None):
    n = lp.n_vars
    lp_A_ub, lp_A_eq = _dense(lp.A_ub), _dense(lp.A_eq)

    # z = offset + T @ y with y >= 0; free variables split into two columns
    cols = []
    offset = np.zeros(n)
    extra_rows = []  # (column index in y, upper bound) for doubly bounded variables
    for j in range(n):
        lo, hi = lp.lb[j], lp.ub[j]
        if np.isfinite(lo):
            offset[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ny = len(cols)
    T = np.zeros((n, ny))
    for k, (j, sgn) in enumerate(cols):
        T[j, k] = sgn

    A_ub = lp_A_ub @ T
    b_ub = lp.b_ub - lp_A_ub @ offset
    if extra_rows:
        B = np.zeros((len(extra_rows), ny))
        for r, (k, bound) in enumerate(extra_rows):
            B[r, k] = 1.0
        A_ub = np.vstack([A_ub, B])
        b_ub = np.concatenate([b_ub, [bound for _, bound in extra_rows]])
    A_eq = lp_A_eq @ T
    b_eq = lp.b_eq - lp_A_eq @ offset
    c = T.T @ lp.c

    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    if max_iter is None:
        max_iter = 50 * (m + ny) + 1000

    # standard form: [A_ub I; A_eq 0] [y; s] = b, rows flipped so b >= 0
    A = np.zeros((m, ny + m_ub))
    A[:m_ub, :ny] = A_ub
    A[:m_ub, ny:] = np.eye(m_ub)
    A[m_ub:, :ny] = A_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0

    nstd = ny + m_ub
    basis = np.full(m, -1, dtype=int)
    for i in range(m_ub):
        if not neg[i]:
            basis[i] = ny + i
    need_art = np.flatnonzero(basis < 0)
    nart = need_art.size
    tab = np.zeros((m + 1, nstd + nart + 1))
    tab[:m, :nstd] = A
    tab[:m, -1] = b
    for k, i in enumerate(need_art):
        tab[i, nstd + k] = 1.0
        basis[i] = nstd + k

    iters = 0
    if nart:
        M1 = tab[:m, :-1].copy()
        cost1 = np.zeros(nstd + nart)
        cost1[nstd:] = 1.0
        tab[m, :] = 0.0
        tab[m, nstd:nstd + nart] = 1.0
        for i in need_art:
            tab[m, :] -= tab[i, :]
        feas = FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0))
        status, iters = _run(tab, basis, nstd + nart, max_iter, iters, (M1, b, cost1), stop_below=feas)
        if status == ITERATION_LIMIT:
            return ITERATION_LIMIT, None, np.nan, iters
        if -tab[m, -1] > feas:
            return INFEASIBLE, None, np.inf, iters
        # pivot remaining artificials out of the basis, dropping redundant rows
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= nstd:
                row = np.abs(tab[i, :nstd])
                # a column of matching sign keeps a small leftover rhs nonnegative
                same = np.where(tab[i, :nstd] * tab[i, -1] >= 0, row, 0.0)
                if same.max(initial=0.0) > 1e-7:
                    row = same
                q = int(np.argmax(row)) if nstd else -1
                if q >= 0 and row[q] > 1e-7:
                    _pivot(tab, basis, i, q)
                else:
                    keep[i] = False
        if not keep.all():
            rows = np.concatenate([np.flatnonzero(keep), [m]])
            tab = tab[rows]
            basis = basis[keep]
            A, b = A[keep], b[keep]
            m = basis.size
        tab = np.hstack([tab[:, :nstd], tab[:, -1:]])

    cost2 = np.zeros(nstd)
    cost2[:ny] = c
    tab[m, :] = 0.0
    tab[m, :ny] = c
    for i in range(m):
        tab[m, :] -= tab[m, basis[i]] * tab[i, :]
    status, iters = _run(tab, basis, nstd, max_iter, iters, (A, b, cost2))
    if status != OPTIMAL:
        return status, None, (-np.inf if status == UNBOUNDED else np.nan), iters

    ystd = np.zeros(nstd)
    ystd[basis] = np.maximum(tab[:m, -1], 0.0)
    z = offset + T @ ystd[:ny]
    return OPTIMAL, z, float(lp.c @ z), iters


def _pivot(tab, basis, r, q):
    tab[r, :] /= tab[r, q]
    col = tab[:, q].copy()
    col[r] = 0.0
    tab -= np.outer(col, tab[r, :])
    basis[r] = q


def _refactor(tab, basis, original) -> bool:
    """Rebuild the tableau from the original rows for the current basis."""
    M, b, cost = original
    m = basis.size
    B = M[:, basis]
    if np.linalg.cond(B) > 1e12:
        return False
    X = np.linalg.solve(B, np.column_stack([M, b]))
    tab[:m, :-1] = X[:, :-1]
    tab[:m, -1] = X[:, -1]
    cb = cost[basis]
    tab[m, :-1] = cost - cb @ X[:, :-1]
    tab[m, -1] = -cb @ X[:, -1]
    return True


def _run(tab, basis, ncols, max_iter, iters, original, stop_below=None):
    """Pivot until optimal or unbounded.

    Entering columns are priced by most negative reduced cost; after a run of
    degenerate pivots the rule switches to Bland's (lowest index enters,
    lowest basic index leaves on ties), which cannot cycle. The tableau is
    periodically rebuilt from ``original`` to stop rounding drift, and
    optimality is only declared on a freshly rebuilt tableau. With
    ``stop_below`` the run also ends once the objective drops under it
    (phase one only needs to reach zero).
    """
    m = basis.size
    stall = 0
    fresh = False
    while True:
        if iters >= max_iter:
            return ITERATION_LIMIT, iters
        if stop_below is not None and -tab[m, -1] <= stop_below:
            return OPTIMAL, iters
        red = tab[m, :ncols]
        enter = np.flatnonzero(red < -COST_TOL)
        if enter.size == 0:
            if fresh or not _refactor(tab, basis, original):
                return OPTIMAL, iters
            fresh = True
            continue
        bland = stall >= DEGENERATE_RUN
        q = enter[0] if bland else enter[np.argmin(red[enter])]
        col = tab[:m, q]
        pos = np.flatnonzero(col > PIVOT_TOL)
        if pos.size == 0:
            return UNBOUNDED, iters
        rhs = tab[pos, -1]
        if bland:
            ratios = rhs / col[pos]
            best = ratios.min()
            ties = pos[ratios <= best + 1e-12 * max(1.0, abs(best))]
            r = ties[np.argmin(basis[ties])]
        else:
            # Harris two-pass ratio test: largest pivot among near-ties
            bound = ((np.maximum(rhs, 0.0) + HARRIS_TOL) / col[pos]).min()
            ok = pos[rhs / col[pos] <= bound]
            r = ok[np.argmax(col[ok])]
            best = max(tab[r, -1], 0.0) / col[r]
        stall = stall + 1 if best <= 1e-12 else 0
        _pivot(tab, basis, r, q)
        iters += 1
        fresh = False
        if iters % REFACTOR_EVERY == 0:
            fresh = _refactor(tab, basis, original)
