import time
from types import SimpleNamespace

import numpy as np
import pytest

from pwacert.config import load_config
from pwacert.dynamics import simulate_batch
from pwacert.relu import fit_surrogate, relu_to_pwa, sample_domain
from pwacert.uis import NoCertifiedMember
from pwacert.verify import Budgets, certify_nonlinear

_CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_CRITERIA):
        terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        _CRITERIA.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def run_pipeline(name: str, interior: bool | None = None) -> SimpleNamespace:
    """Fit, convert and certify one bundled benchmark, as ``pwacert run`` does."""
    cfg = load_config(name)
    dyn = cfg.dynamics()
    t0 = time.perf_counter()
    s = cfg.surrogate
    net = fit_surrogate(dyn, s.width, s.samples, s.seed, epochs=s.epochs)
    pwa = relu_to_pwa(net, dyn.domain)
    b = cfg.budgets
    budgets = Budgets(b.outer_iters, b.wall_clock_s, b.restarts, cfg.threads,
                      b.verify_interior if interior is None else interior)
    try:
        result = certify_nonlinear(dyn, pwa, cfg.synthesis, cfg.alpha_grid, budgets)
        error = None
    except NoCertifiedMember as exc:
        result, error = None, exc
    return SimpleNamespace(cfg=cfg, dyn=dyn, net=net, pwa=pwa, result=result, error=error,
                           elapsed=time.perf_counter() - t0)


def simulate_inside(run: SimpleNamespace, count: int, seed: int):
    """CBF-QP trajectories from states sampled uniformly in the certified set."""
    dyn, barrier, sim = run.dyn, run.result.barrier, run.cfg.sim
    rng = np.random.default_rng(seed)
    X0 = np.zeros((0, dyn.n))
    while X0.shape[0] < count:
        X = sample_domain(dyn.domain, 20 * count, rng)
        X0 = np.vstack([X0, X[barrier.contains(X)]])
    return simulate_batch(dyn, "cbf_qp", X0[:count], sim.horizon_s, sim.dt, barrier=barrier)


@pytest.fixture(scope="session")
def pendulum():
    return run_pipeline("pendulum.toml")


@pytest.fixture(scope="session")
def pendulum_sim(pendulum):
    return simulate_inside(pendulum, 200, seed=1)


@pytest.fixture(scope="session")
def poly2d():
    return run_pipeline("poly2d.toml")


@pytest.fixture(scope="session")
def cartpole():
    return run_pipeline("cartpole.toml")
