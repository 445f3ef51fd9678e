from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pwacert.dynamics import DynamicsModel, builtin, linear_system
from pwacert.geometry import Partition, Polytope
from pwacert.relu import PwaFunction
from pwacert.synthesis import SynthesisConfig, UncertaintyMap
from pwacert.uis import Member, UisBarrier
from pwacert.verify import (
    COUNTEREXAMPLE,
    VERIFIED,
    Budgets,
    certify_nonlinear,
    facet_patches,
    farkas_value,
    interior_patches,
    phi,
    project_simplex,
    segment_hull_vertices,
    update_uncertainty,
    verify_facet,
)
from helpers import STABLE, grid_partition, linear_pwa

BOX = Polytope.box([-1, -1], [1, 1])


def single_piece(s, t, alpha=0.5):
    part = Partition([BOX], BOX)
    return UisBarrier([Member(PwaFunction(part, np.atleast_2d(s), [t]), alpha)])


def triangle_input_system():
    """Two inputs in a triangle, so the support term needs its vertices (no box)."""
    tri = Polytope.from_vertices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def g(X):
        X = np.atleast_2d(X)
        G = np.zeros((X.shape[0], 2, 2))
        G[:, 0, 0] = 1.0 + X[:, 1] ** 2
        G[:, 1, 1] = np.cos(X[:, 0])
        G[:, 0, 1] = -0.5
        return G

    return DynamicsModel(
        name="tri", n=2, m=2,
        f=lambda X: np.column_stack([np.atleast_2d(X)[:, 1], -np.sin(np.atleast_2d(X)[:, 0])]),
        g=g, kappa=lambda X: np.zeros((np.atleast_2d(X).shape[0], 2)),
        input_set=tri, domain=BOX,
    )


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(-3, 3), st.booleans())
def test_farkas_lp_matches_closed_form(s1, s2, x1, x2, use_triangle):
    dyn = triangle_input_system() if use_triangle else builtin("pendulum")
    s = np.array([s1, s2])
    x = np.array([x1, x2])
    lp_value, lam = farkas_value(dyn, s, x)
    assert lp_value == pytest.approx(phi(dyn, s, x[None])[0], abs=1e-9)
    # the multiplier certifies the support value: A_u^T lambda = g^T s with lambda >= 0
    assert np.all(lam >= -1e-12)
    np.testing.assert_allclose(dyn.A_u.T @ lam, s @ dyn.g(x[None])[0], atol=1e-9)


def test_autonomous_phi_is_drift():
    dyn = builtin("poly2d")
    X = np.array([[0.5, 0.5]])
    assert phi(dyn, np.array([1.0, 0.0]), X)[0] == pytest.approx(0.25 + 0.25 + 0.5)
    assert farkas_value(dyn, np.array([1.0, 0.0]), X[0])[0] == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.integers(0, 2**31 - 1))
def test_simplex_projection_variational_inequality(w, seed):
    w = np.array(w)
    p = project_simplex(w[None])[0]
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)
    Q = np.random.default_rng(seed).dirichlet(np.ones(w.size), size=50)
    # (w - p) . (q - p) <= 0 for every q in the simplex characterises the projection
    assert np.all((Q - p) @ (w - p) <= 1e-9)


def test_single_patch_geometry():
    b = single_piece([-1.0, 0.0], 0.5)  # h = 0.5 - x1
    patches = facet_patches(b)
    assert len(patches) == 1
    V = patches[0].vertices
    np.testing.assert_allclose(np.sort(V[:, 1]), [-1.0, 1.0])
    np.testing.assert_allclose(V[:, 0], 0.5)
    inner = interior_patches(single_piece([-1.0, 0.0], 0.2))
    assert len(inner) == 1 and inner[0].interior
    assert inner[0].polytope.volume == pytest.approx(2.4)  # x1 <= 0.2
    assert np.all(inner[0].vertices[:, 0] <= 0.2 + 1e-12)


def test_counterexample_found_at_known_minimum():
    # xdot = (x2, -x1): on x1 = 0.5 the objective is -x2, minimal at x2 = 1
    dyn = linear_system([[0.0, 1.0], [-1.0, 0.0]], BOX)
    patch = facet_patches(single_piece([-1.0, 0.0], 0.5))[0]
    out = verify_facet(dyn, patch)
    assert out.status == COUNTEREXAMPLE
    assert out.phi_star == pytest.approx(-1.0, abs=1e-9)
    np.testing.assert_allclose(out.witness, [0.5, 1.0], atol=1e-6)


def test_contracting_field_verifies():
    dyn = linear_system(-np.eye(2), BOX)
    patch = facet_patches(single_piece([-1.0, 0.0], 0.5))[0]
    out = verify_facet(dyn, patch)
    assert out.status == VERIFIED
    assert out.phi_star == pytest.approx(0.5)


def test_interior_patch_adds_alpha_term():
    # xdot = (1, 0) pushes into the boundary: -1 + alpha * h is negative near x1 = 0.5
    dyn = replace(linear_system(np.zeros((2, 2)), BOX), f=lambda X: np.tile([1.0, 0.0], (len(np.atleast_2d(X)), 1)))
    b = single_piece([-1.0, 0.0], 0.5, alpha=0.5)
    inner = interior_patches(b)[0]
    out = verify_facet(dyn, inner)
    assert out.status == COUNTEREXAMPLE
    assert out.phi_star == pytest.approx(-1.0, abs=1e-7)  # attained on the zero level set
    assert inner.alpha == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=6))
def test_box_update_is_monotone_and_covers_segments(errors):
    unc = UncertaintyMap()
    seg = None
    for e in errors:
        e = np.array(e)
        new = update_uncertainty(unc, 4, e)
        if unc.get(4) is not None:
            lo0, hi0 = unc.get(4).bbox
            lo1, hi1 = new.get(4).bbox
            assert np.all(lo1 <= lo0 + 1e-12) and np.all(hi1 >= hi0 - 1e-12)
        unc = new
        seg = segment_hull_vertices(seg, e)
    if unc.get(4) is not None:
        assert np.all(unc.get(4).contains(seg, 1e-9))
        assert unc.cells() == [4]


def test_box_update_identity_and_zero():
    unc = update_uncertainty(UncertaintyMap(), 0, [0.5, -1.0])
    lo, hi = unc.get(0).bbox
    np.testing.assert_allclose(lo, [-0.5, -1.0])
    np.testing.assert_allclose(hi, [0.5, 1.0])
    assert update_uncertainty(unc, 0, [0.1, 0.1]) is unc
    empty = UncertaintyMap()
    assert update_uncertainty(empty, 2, [0.0, 0.0]) is empty
    with pytest.raises(ValueError):
        update_uncertainty(unc, 0, [np.nan, 0.0])


def test_outer_loop_absorbs_model_error():
    part = grid_partition([-np.pi, -np.pi], [np.pi, np.pi], 4)
    surrogate = linear_pwa(STABLE, part)

    def f(X):
        X = np.atleast_2d(X)
        return X @ STABLE.T + np.column_stack([np.zeros(len(X)), 0.3 * np.sin(X[:, 0])])

    true = replace(linear_system(STABLE, part.domain), f=f)
    res = certify_nonlinear(true, surrogate, SynthesisConfig(), [0.3, 0.6], Budgets(outer_iters=6))
    assert res.certified
    assert res.report["outer_iterations"] >= 1
    assert all(o.status == VERIFIED for o in res.outcomes)
    if res.report["outer_iterations"] > 1:
        assert len(res.unc) > 0
