import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pwacert.lp import INFEASIBLE, OPTIMAL, UNBOUNDED, LpProblem, solve_lp
from helpers import brute_force_vertices, random_bounded_lp


def test_five_hundred_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(20240611)
    cap = 5000
    worst = 0.0
    for _ in range(500):
        A, b, c = random_bounded_lp(rng)
        ref, _ = brute_force_vertices(A, b, c)
        sol = solve_lp(LpProblem(c, A, b), max_iter=cap)
        assert sol.iterations < cap
        if np.isinf(ref):
            assert sol.status == INFEASIBLE
            continue
        assert sol.status == OPTIMAL
        assert np.all(A @ sol.x <= b + 1e-7)
        worst = max(worst, abs(sol.objective - ref) / max(1.0, abs(ref)))
    assert worst <= 1e-7


def test_unbounded_is_reported_as_status():
    sol = solve_lp(LpProblem([-1.0, 0.0], [[1.0, -1.0]], [1.0], lb=[0.0, 0.0]))
    assert sol.status == UNBOUNDED


def test_infeasible_equalities():
    sol = solve_lp(LpProblem([1.0, 1.0], A_eq=[[1.0, 1.0], [1.0, 1.0]], b_eq=[1.0, 2.0]))
    assert sol.status == INFEASIBLE


def test_equalities_bounds_and_free_variables():
    # min x + 2y  s.t. x + y = 3, x <= 2, y free  ->  x = 2, y = 1
    sol = solve_lp(LpProblem([1.0, 2.0], A_eq=[[1.0, 1.0]], b_eq=[3.0], ub=[2.0, np.inf]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.x, [2.0, 1.0], atol=1e-9)
    assert sol.objective == pytest.approx(4.0)


def test_klee_minty_cube_terminates():
    n = 6
    A = np.zeros((n, n))
    b = np.array([5.0 ** (i + 1) for i in range(n)])
    for i in range(n):
        A[i, i] = 1.0
        for j in range(i):
            A[i, j] = 2.0 * 2 ** (i - j)
    c = -np.array([2.0 ** (n - j - 1) for j in range(n)])
    sol = solve_lp(LpProblem(c, A, b, lb=np.zeros(n)))
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(-(5.0 ** n))


def test_degenerate_lp_does_not_cycle():
    # Beale's classical cycling example for Dantzig's rule without anti-cycling
    c = np.array([-0.75, 150.0, -0.02, 6.0])
    A = np.array([[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]])
    b = np.array([0.0, 0.0, 1.0])
    sol = solve_lp(LpProblem(c, A, b, lb=np.zeros(4)), max_iter=200)
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(-0.05)


def test_dump_lists_every_row():
    lp = LpProblem([1.0, -1.0], [[1.0, 1.0]], [2.0], [[1.0, -1.0]], [0.0], var_names=["x", "y"])
    text = lp.dump()
    assert "min +1 x -1 y" in text
    assert "ub0: +1 x +1 y <= 2" in text
    assert "eq0: +1 x -1 y = 0" in text
    assert text.endswith("ENDATA\n")


def test_rejects_non_finite_coefficients():
    with pytest.raises(ValueError):
        LpProblem([1.0, np.nan])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_simplex_agrees_with_highs(seed):
    rng = np.random.default_rng(seed)
    A, b, c = random_bounded_lp(rng)
    mine = solve_lp(LpProblem(c, A, b), method="simplex")
    ref = solve_lp(LpProblem(c, A, b), method="highs")
    assert mine.status == ref.status
    if ref.ok:
        assert mine.objective == pytest.approx(ref.objective, rel=1e-7, abs=1e-7)


def test_tiny_equality_rhs_is_not_rounded_away():
    # min 1.5 a + 1.5 b  s.t.  b - a = 1e-8, a, b >= 0: phase one starts
    # already below its stopping tolerance, the answer must still be feasible
    sol = solve_lp(LpProblem([1.5, 1.5], A_eq=[[-1.0, 1.0]], b_eq=[1e-8], lb=[0.0, 0.0]))
    assert sol.status == OPTIMAL
    assert sol.objective == pytest.approx(1.5e-8, abs=1e-15)
