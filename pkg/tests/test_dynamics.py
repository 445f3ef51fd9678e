import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from pwacert.dynamics import (
    QPInfeasible,
    builtin,
    cbf_qp_control,
    cbf_qp_control_batch,
    linear_system,
    simulate,
    simulate_batch,
)
from pwacert.geometry import Partition, Polytope
from pwacert.relu import PwaFunction
from pwacert.uis import Member, UisBarrier


def affine_barrier(domain, s, t, alpha=1.0):
    part = Partition([domain], domain)
    return UisBarrier([Member(PwaFunction(part, np.atleast_2d(s), [t]), alpha)])


def test_builtin_configurations():
    p = builtin("pendulum")
    np.testing.assert_allclose(p.domain.bbox[1], [np.pi, np.pi])
    np.testing.assert_allclose(p.input_set.bbox[0], [-1.5])
    np.testing.assert_allclose(p.kappa(np.array([[0.1, 0.2]])), [[-0.9]])
    np.testing.assert_allclose(p.kappa_sat(np.array([[1.0, 1.0]])), [[-1.5]])
    c = builtin("cartpole")
    assert (c.n, c.m) == (4, 1)
    np.testing.assert_allclose(c.domain.bbox[1], np.ones(4))
    np.testing.assert_allclose(c.input_set.bbox[1], [30.0])
    np.testing.assert_allclose(c.f(np.zeros((1, 4))), 0.0, atol=1e-15)
    q = builtin("poly2d")
    assert q.m == 0
    np.testing.assert_allclose(q.f(np.array([[1.0, 1.0]])), [[3.0, 3.0]])
    with pytest.raises(ValueError):
        builtin("acrobot")


def test_rk4_is_fourth_order():
    A = np.array([[0.0, 1.0], [-2.0, -0.5]])
    dyn = linear_system(A, Polytope.box([-5, -5], [5, 5]))
    x0 = np.array([1.0, 0.0])
    exact = expm(A * 1.0) @ x0
    errs = []
    for dt in (1e-2, 5e-3):
        tr = simulate(dyn, "nominal", x0, 1.0, dt)
        errs.append(np.linalg.norm(tr.x[-1] - exact))
    assert 12.0 < errs[0] / errs[1] < 20.0


def test_batch_matches_single_trajectories():
    dyn = builtin("pendulum")
    X0 = np.array([[0.5, -0.3], [-1.0, 1.0], [2.0, 0.0]])
    res = simulate_batch(dyn, "nominal", X0, 0.5, 1e-3, record_every=1)
    for k, x0 in enumerate(X0):
        tr = simulate(dyn, "nominal", x0, 0.5, 1e-3)
        np.testing.assert_allclose(res.states[:, k], tr.x, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.05, 3.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_batch_qp_matches_pointwise(s1, s2, t, x1, x2):
    dyn = builtin("pendulum")
    b = affine_barrier(dyn.domain, [s1, s2], t, alpha=0.5)
    x = np.array([x1, x2])
    U, bad = cbf_qp_control_batch(dyn, b, x[None])
    try:
        u = cbf_qp_control(dyn, b, x)
    except QPInfeasible:
        assert bad[0]
        return
    assert not bad[0]
    np.testing.assert_allclose(U[0], u, atol=1e-9)
    # the constraint holds and the input is admissible
    h, s = b.value_and_gradient(x)
    assert s @ dyn.flow(x[None], u[None])[0] + b.alpha_bar(h) >= -1e-9
    assert -1.5 - 1e-12 <= u[0] <= 1.5 + 1e-12


def test_qp_infeasible_carries_state():
    dyn = builtin("pendulum")
    # h = 5 - x1 - x2; at x the condition needs u <= -x2 - sin(x1) + 0.005 < -1.5
    b = affine_barrier(dyn.domain, [-1.0, -1.0], 5.0, alpha=0.01)
    x = np.array([1.5, 3.0])
    with pytest.raises(QPInfeasible) as info:
        cbf_qp_control(dyn, b, x)
    np.testing.assert_array_equal(info.value.x, x)


def test_trajectory_csv_columns(tmp_path):
    dyn = builtin("pendulum")
    b = affine_barrier(dyn.domain, [0.0, 0.0], 1.0)
    tr = simulate(dyn, "cbf_qp", [0.1, 0.0], 0.01, 1e-3, barrier=b)
    tr.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["t", "x1", "x2", "u1", "h"]
    assert len(rows) == 12
    res = simulate_batch(dyn, "cbf_qp", np.array([[0.1, 0.0]]), 0.01, 1e-3, barrier=b, record_every=5)
    res.trajectory_csv(0, tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["t", "x1", "x2", "u1", "h"] and len(rows) == 4


def test_exit_is_detected_and_frozen():
    dyn = linear_system([[1.0, 0.0], [0.0, 1.0]], Polytope.box([-1, -1], [1, 1]))
    res = simulate_batch(dyn, "nominal", np.array([[0.5, 0.0], [0.0, 0.0]]), 2.0, 1e-3)
    assert res.exited.tolist() == [True, False]
    assert np.all(np.isnan(res.states[-1, 0]))


def test_rejects_large_step_and_outside_start():
    dyn = builtin("pendulum")
    with pytest.raises(ValueError):
        simulate(dyn, "nominal", [0.0, 0.0], 1.0, dt=0.1)
    with pytest.raises(ValueError):
        simulate_batch(dyn, "nominal", np.array([[4.0, 0.0]]), 1.0)
