from math import comb

import numpy as np
import pytest

from pwacert.dynamics import builtin, linear_system
from pwacert.geometry import Polytope
from pwacert.relu import OutOfDomain, ReluNetwork, fit_surrogate, grid_points, relu_to_pwa, sample_domain


def random_net(rng, n, width):
    return ReluNetwork(rng.normal(size=(width, n)), rng.normal(size=width) * 0.5,
                       rng.normal(size=(n, width)), rng.normal(size=n))


@pytest.mark.parametrize("n,width", [(1, 5), (2, 6), (2, 12), (3, 5)])
def test_pwa_reproduces_network_exactly(n, width):
    rng = np.random.default_rng(width + n)
    net = random_net(rng, n, width)
    dom = Polytope.box(-np.ones(n) * 2, np.ones(n) * 2)
    pwa = relu_to_pwa(net, dom)
    X = sample_domain(dom, 20_000, rng)
    assert np.max(np.abs(pwa.evaluate(X) - net(X))) <= 1e-9
    # every region lies in the domain and the regions tile it
    assert pwa.partition.total_volume() == pytest.approx(dom.volume, rel=1e-9)
    # an arrangement of `width` hyperplanes has at most sum_i C(width, i) regions
    assert len(pwa.partition) <= sum(comb(width, i) for i in range(n + 1))
    assert pwa.continuity_defect() <= 1e-9


def test_dead_neurons_give_one_region():
    net = ReluNetwork(np.array([[1.0, 0.0]]), np.array([-10.0]), np.array([[1.0], [2.0]]), np.array([0.5, -0.5]))
    pwa = relu_to_pwa(net, Polytope.box([-1, -1], [1, 1]))
    assert len(pwa.partition) == 1
    np.testing.assert_allclose(pwa.A[0], 0.0)
    np.testing.assert_allclose(pwa.a[0], [0.5, -0.5])


def test_evaluate_outside_domain_raises():
    net = random_net(np.random.default_rng(0), 2, 3)
    pwa = relu_to_pwa(net, Polytope.box([-1, -1], [1, 1]))
    with pytest.raises(OutOfDomain):
        pwa.evaluate(np.array([[5.0, 0.0]]))


def test_network_json_roundtrip(tmp_path):
    net = random_net(np.random.default_rng(1), 2, 4)
    net.save(tmp_path / "w.json")
    back = ReluNetwork.load(tmp_path / "w.json")
    np.testing.assert_array_equal(back.W1, net.W1)
    np.testing.assert_array_equal(back.b2, net.b2)


def test_inconsistent_shapes_rejected():
    with pytest.raises(ValueError):
        ReluNetwork(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 3)), np.zeros(2))


def test_fit_is_deterministic_and_accurate_on_linear_field():
    dyn = linear_system([[0.0, 1.0], [-2.0, -3.0]], Polytope.box([-1, -1], [1, 1]))
    a = fit_surrogate(dyn, 6, 500, seed=3, epochs=400)
    b = fit_surrogate(dyn, 6, 500, seed=3, epochs=400)
    np.testing.assert_array_equal(a.W1, b.W1)
    X = sample_domain(dyn.domain, 2000, np.random.default_rng(9))
    Y = dyn.closed_loop(X)
    assert np.abs(a(X) - Y).max() < 0.1 * np.abs(Y).max()


def test_fit_report_holdout_residual_is_against_saturated_closed_loop():
    dyn = builtin("pendulum")
    net = fit_surrogate(dyn, 8, 1000, seed=0, epochs=300)
    G = grid_points(dyn.domain)
    assert net.report["holdout_max_residual"] == pytest.approx(np.abs(net(G) - dyn.closed_loop(G)).max())
    # saturation matters on this domain: the unsaturated law would differ
    assert np.abs(dyn.kappa(G)).max() > 1.5
