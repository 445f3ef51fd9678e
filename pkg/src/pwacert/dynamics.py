"""Benchmark systems, saturated nominal control, CBF-QP filtering and simulation.

All vector-valued callables are batched: ``f(X)`` maps an ``(N, n)`` array of
states to ``(N, n)`` drifts and ``g(X)`` to ``(N, n, m)`` input matrices.

Cart-pole (state ``(x, xdot, phi, phidot)``, ``phi = pi - theta`` so the
upright equilibrium is the origin, ``theta`` measured from hanging down)::

    d      = m_c + m_p sin(phi)^2
    xddot  = (u + m_p sin(phi) (l phidot^2 - g cos(phi))) / d
    phiddot = (-u cos(phi) - m_p l phidot^2 cos(phi) sin(phi) + (m_c + m_p) g sin(phi)) / (l d)
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Polytope


class QPInfeasible(RuntimeError):
    def __init__(self, x):
        super().__init__(f"CBF-QP infeasible at x={np.asarray(x).tolist()}")
        self.x = np.asarray(x)


class IntegrationBlowUp(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    name: str
    n: int
    m: int
    f: Callable
    g: Callable
    kappa: Callable
    input_set: Polytope
    domain: Polytope
    unsafe: Polytope | None = None
    initial: Polytope | None = None
    lipschitz_hint: float | None = None

    @property
    def A_u(self) -> np.ndarray:
        return -self.input_set.E

    @property
    def c_u(self) -> np.ndarray:
        return self.input_set.e

    @property
    def input_box(self):
        """``(lo, hi)`` when the input set is an axis-aligned box, else ``None``."""
        if self.m == 0:
            return np.zeros(0), np.zeros(0)
        E = self.input_set.E
        if not np.all(np.sum(np.abs(E) > 1e-12, axis=1) == 1):
            return None
        lo, hi = self.input_set.bbox
        if self.input_set.vertices.shape[0] != 2 ** self.m:
            return None
        return lo, hi

    def kappa_sat(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.m == 0:
            return np.zeros((X.shape[0], 0))
        K = np.atleast_2d(self.kappa(X))
        box = self.input_box
        if box is not None:
            return np.clip(K, box[0], box[1])
        return np.array([project_onto(self.A_u, self.c_u, k) for k in K])

    def flow(self, X, U) -> np.ndarray:
        X = np.atleast_2d(X)
        F = self.f(X)
        if self.m == 0:
            return F
        return F + np.einsum("knm,km->kn", self.g(X), np.atleast_2d(U))

    def closed_loop(self, X) -> np.ndarray:
        return self.flow(X, self.kappa_sat(X))


def project_onto(G: np.ndarray, w: np.ndarray, target: np.ndarray, tol: float = 1e-10):
    """Euclidean projection of ``target`` onto ``{u : G u <= w}``, or ``None``.

    Enumerates candidate active sets of size at most ``dim(u)``; exact for the
    small input dimensions used here.
    """
    target = np.asarray(target, dtype=float)
    m = target.size
    scale = 1.0 + np.abs(w).max(initial=0.0)
    if np.all(G @ target <= w + tol * scale):
        return target.copy()
    best, best_d = None, np.inf
    rows = range(G.shape[0])
    for k in range(1, m + 1):
        for S in itertools.combinations(rows, k):
            Gs = G[list(S)]
            M = Gs @ Gs.T
            if abs(np.linalg.det(M)) < 1e-14:
                continue
            u = target - Gs.T @ np.linalg.solve(M, Gs @ target - w[list(S)])
            if np.all(G @ u <= w + tol * scale):
                dist = float(np.sum((u - target) ** 2))
                if dist < best_d:
                    best, best_d = u, dist
    return best


def cbf_qp_control(dyn: DynamicsModel, barrier, x) -> np.ndarray:
    """Minimally modify the nominal input so the barrier condition holds at ``x``.

    Solves ``min |u - kappa(x)|^2`` s.t. ``A_u u <= c_u`` and
    ``s^T (f(x) + g(x) u) >= -alpha_bar(h(x))``, with ``s`` the gradient of the
    active barrier piece. Raises ``QPInfeasible`` when no admissible input exists.
    """
    x = np.asarray(x, dtype=float)
    if dyn.m == 0:
        return np.zeros(0)
    h, s = barrier.value_and_gradient(x)
    rhs = float(s @ dyn.f(x[None])[0]) + barrier.alpha_bar(h)
    sg = s @ dyn.g(x[None])[0]
    u_sat = dyn.kappa_sat(x[None])[0]
    scale = 1.0 + abs(rhs)
    if -sg @ u_sat <= rhs + 1e-12 * scale:
        return u_sat
    G = np.vstack([dyn.A_u, -sg[None, :]])
    w = np.concatenate([dyn.c_u, [rhs]])
    kappa = np.atleast_2d(dyn.kappa(x[None]))[0]
    u = project_onto(G, w, kappa, tol=1e-12)
    if u is None:
        raise QPInfeasible(x)
    return u


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    h: np.ndarray | None
    exited: bool = False
    qp_infeasible: list = field(default_factory=list)

    @property
    def min_h(self) -> float:
        return float(np.nanmin(self.h)) if self.h is not None and np.any(np.isfinite(self.h)) else np.nan

    def to_csv(self, path) -> None:
        n, m = self.x.shape[1], self.u.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)] + ["h"])
            for k in range(self.t.size):
                hk = "" if self.h is None else repr(float(self.h[k]))
                w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in self.x[k]]
                           + [repr(float(v)) for v in self.u[k]] + [hk])


def simulate(dyn: DynamicsModel, controller: str, x0, horizon: float, dt: float = 1e-3, barrier=None) -> Trajectory:
    """RK4 integration of the closed loop with the input re-evaluated at every stage."""
    if dt > 1e-2:
        raise ValueError("dt must not exceed 1e-2")
    if controller not in ("nominal", "cbf_qp"):
        raise ValueError(f"unknown controller {controller!r}")
    if controller == "cbf_qp" and barrier is None:
        raise ValueError("cbf_qp controller requires a barrier")
    x = np.asarray(x0, dtype=float).copy()
    if not dyn.domain.contains(x):
        raise ValueError("initial state outside the domain")
    infeasible = []

    def control(z):
        if controller == "nominal":
            return dyn.kappa_sat(z[None])[0]
        try:
            return cbf_qp_control(dyn, barrier, z)
        except QPInfeasible:
            infeasible.append(z.copy())
            return _best_effort_input(dyn, barrier, z)

    def field_at(z):
        u = control(z)
        return dyn.flow(z[None], u[None])[0], u

    steps = int(round(horizon / dt))
    ts, xs, us, hs = [0.0], [x.copy()], [], []
    exited = False
    for k in range(steps):
        k1, u = field_at(x)
        us.append(u)
        if barrier is not None:
            hs.append(barrier.value_and_gradient(x)[0])
        k2, _ = field_at(x + 0.5 * dt * k1)
        k3, _ = field_at(x + 0.5 * dt * k2)
        k4, _ = field_at(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationBlowUp("integration blow-up")
        ts.append((k + 1) * dt)
        xs.append(x.copy())
        if not dyn.domain.contains(x):
            exited = True
            break
    last_u = control(x) if not exited else (us[-1] if us else np.zeros(dyn.m))
    us.append(last_u)
    if barrier is not None:
        hs.append(barrier.value_and_gradient(x)[0] if dyn.domain.contains(x) else np.nan)
    return Trajectory(
        t=np.array(ts),
        x=np.array(xs),
        u=np.array(us).reshape(len(ts), dyn.m),
        h=np.array(hs) if barrier is not None else None,
        exited=exited,
        qp_infeasible=infeasible,
    )


@dataclass
class BatchResult:
    """Summary of many trajectories integrated together.

    ``states`` keeps every ``record_every``-th state, shaped ``(T, N, n)``,
    with the input applied from it and the barrier value there (NaN once a
    trajectory has left the domain).
    """

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    h: np.ndarray
    min_h: np.ndarray
    exited: np.ndarray
    qp_infeasible: np.ndarray  # count per trajectory (first RK stage of each step)
    infeasible_states: np.ndarray

    def trajectory_csv(self, k: int, path) -> None:
        n, m = self.states.shape[2], self.inputs.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i+1}" for i in range(n)] + [f"u{j+1}" for j in range(m)] + ["h"])
            for t, x, u, h in zip(self.t, self.states[:, k], self.inputs[:, k], self.h[:, k]):
                if np.all(np.isfinite(x)):
                    w.writerow([repr(float(t))] + [repr(float(v)) for v in x]
                               + [repr(float(v)) for v in u] + [repr(float(h))])


def cbf_qp_control_batch(dyn: DynamicsModel, barrier, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``cbf_qp_control`` returning ``(inputs, infeasible mask)``.

    Single-input box constraints have a closed-form solution (clip the
    nominal input to an interval); other input sets fall back to the
    pointwise solver.
    """
    X = np.atleast_2d(X)
    N = X.shape[0]
    if dyn.m == 0:
        return np.zeros((N, 0)), np.zeros(N, dtype=bool)
    H, S = barrier.value_and_gradient_batch(X)
    box = dyn.input_box
    if dyn.m != 1 or box is None:
        U = np.empty((N, dyn.m))
        bad = np.zeros(N, dtype=bool)
        for k in range(N):
            try:
                U[k] = cbf_qp_control(dyn, barrier, X[k])
            except QPInfeasible:
                bad[k] = True
                U[k] = _best_effort_input(dyn, barrier, X[k])
        return U, bad
    lo, hi = float(box[0][0]), float(box[1][0])
    rhs = np.einsum("kn,kn->k", S, dyn.f(X)) + barrier.alpha_bar(H)
    a = np.einsum("kn,kn->k", S, dyn.g(X)[:, :, 0])
    # feasible inputs satisfy a u >= -rhs within [lo, hi]
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = -rhs / a
    u_lo = np.where(a > 0, np.maximum(lo, bound), lo)
    u_hi = np.where(a < 0, np.minimum(hi, bound), hi)
    zero = np.abs(a) <= 1e-15
    tol = 1e-12 * (1.0 + np.abs(rhs))
    bad = np.where(zero, rhs < -tol, u_lo > u_hi + tol * (1.0 + np.abs(bound)))
    kappa = np.atleast_2d(dyn.kappa(X))[:, 0]
    u = np.clip(kappa, u_lo, np.maximum(u_lo, u_hi))
    vertex = np.where(a >= 0, hi, lo)
    u = np.where(bad, vertex, u)
    return u[:, None], bad


def simulate_batch(dyn: DynamicsModel, controller: str, X0, horizon: float, dt: float = 1e-3,
                   barrier=None, record_every: int = 100) -> BatchResult:
    """RK4 for many initial states at once, same scheme as ``simulate``.

    Trajectories that leave the domain are frozen there; intermediate stage
    points are clipped to the domain's bounding box before the controller
    is queried.
    """
    if dt > 1e-2:
        raise ValueError("dt must not exceed 1e-2")
    if controller not in ("nominal", "cbf_qp"):
        raise ValueError(f"unknown controller {controller!r}")
    if controller == "cbf_qp" and barrier is None:
        raise ValueError("cbf_qp controller requires a barrier")
    X = np.atleast_2d(np.asarray(X0, dtype=float)).copy()
    N = X.shape[0]
    if not np.all(dyn.domain.contains(X)):
        raise ValueError("initial state outside the domain")
    lo, hi = dyn.domain.bbox
    alive = np.ones(N, dtype=bool)
    min_h = np.full(N, np.inf)
    infeasible = np.zeros(N, dtype=int)

    def field_at(Z, count):
        Zc = np.clip(Z, lo, hi)
        if controller == "nominal":
            U = dyn.kappa_sat(Zc)
        else:
            U, bad = cbf_qp_control_batch(dyn, barrier, Zc)
            if count:
                infeasible[idx[bad]] += 1
                infeasible_states.extend(Zc[bad])
        return dyn.flow(Z, U), U

    def snapshot(t):
        Z = X.copy()
        Z[~alive] = np.nan
        U = np.full((N, dyn.m), np.nan)
        H = np.full(N, np.nan)
        live = np.flatnonzero(alive)
        if live.size:
            Zl = X[live]
            U[live] = dyn.kappa_sat(Zl) if controller == "nominal" else cbf_qp_control_batch(dyn, barrier, Zl)[0]
            if barrier is not None:
                H[live] = barrier.value_and_gradient_batch(Zl)[0]
        times.append(t)
        states.append(Z)
        inputs.append(U)
        hs.append(H)

    steps = int(round(horizon / dt))
    times, states, inputs, hs = [], [], [], []
    infeasible_states = []
    snapshot(0.0)
    for k in range(steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        Z = X[idx]
        if barrier is not None:
            min_h[idx] = np.minimum(min_h[idx], barrier.value_and_gradient_batch(Z)[0])
        k1, _ = field_at(Z, True)
        k2, _ = field_at(Z + 0.5 * dt * k1, False)
        k3, _ = field_at(Z + 0.5 * dt * k2, False)
        k4, _ = field_at(Z + dt * k3, False)
        Z = Z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Z)):
            raise IntegrationBlowUp("integration blow-up")
        X[idx] = Z
        out = ~dyn.domain.contains(Z)
        alive[idx[out]] = False
        if (k + 1) % record_every == 0 or k + 1 == steps:
            snapshot((k + 1) * dt)
    idx = np.flatnonzero(alive)
    if barrier is not None and idx.size:
        min_h[idx] = np.minimum(min_h[idx], barrier.value_and_gradient_batch(X[idx])[0])
    return BatchResult(
        np.array(times), np.array(states), np.array(inputs), np.array(hs),
        min_h if barrier is not None else np.full(N, np.nan), ~alive, infeasible,
        np.array(infeasible_states).reshape(-1, dyn.n),
    )


def _best_effort_input(dyn, barrier, x):
    """Vertex of the input set maximising the barrier derivative."""
    _, s = barrier.value_and_gradient(x)
    sg = s @ dyn.g(x[None])[0]
    V = dyn.input_set.vertices
    return V[int(np.argmax(V @ sg))]


# benchmark systems


def _pendulum() -> DynamicsModel:
    def f(X):
        X = np.atleast_2d(X)
        return np.column_stack([X[:, 1], np.sin(X[:, 0])])

    def g(X):
        X = np.atleast_2d(X)
        G = np.zeros((X.shape[0], 2, 1))
        G[:, 1, 0] = 1.0
        return G

    def kappa(X):
        X = np.atleast_2d(X)
        return (-3.0 * X[:, 0] - 3.0 * X[:, 1])[:, None]

    return DynamicsModel(
        name="pendulum", n=2, m=1, f=f, g=g, kappa=kappa,
        input_set=Polytope.box([-1.5], [1.5]),
        domain=Polytope.box([-np.pi, -np.pi], [np.pi, np.pi]),
    )


def _poly2d() -> DynamicsModel:
    def f(X):
        X = np.atleast_2d(X)
        x1, x2 = X[:, 0], X[:, 1]
        return np.column_stack([x1 ** 2 + x1 * x2 + x1, x1 * x2 + x2 ** 2 + x2])

    def g(X):
        return np.zeros((np.atleast_2d(X).shape[0], 2, 0))

    def kappa(X):
        return np.zeros((np.atleast_2d(X).shape[0], 0))

    return DynamicsModel(
        name="poly2d", n=2, m=0, f=f, g=g, kappa=kappa,
        input_set=Polytope(np.zeros((0, 0)), np.zeros(0)),
        domain=Polytope.box([-2.0, -2.0], [2.0, 2.0]),
        unsafe=Polytope.box([-1.0, -1.0], [0.0, 0.0]),
        initial=Polytope.box([0.5, 0.5], [1.0, 1.0]),
    )


CARTPOLE = {"m_c": 1.0, "m_p": 0.1, "l": 1.0, "g": 9.81, "gains": (1.0, 2.4109, 34.3620, 10.7009)}


def _cartpole() -> DynamicsModel:
    mc, mp, l, grav = CARTPOLE["m_c"], CARTPOLE["m_p"], CARTPOLE["l"], CARTPOLE["g"]
    K = np.array(CARTPOLE["gains"])

    def f(X):
        X = np.atleast_2d(X)
        ph, phd = X[:, 2], X[:, 3]
        sp, cp = np.sin(ph), np.cos(ph)
        d = mc + mp * sp ** 2
        xdd = mp * sp * (l * phd ** 2 - grav * cp) / d
        phdd = (-mp * l * phd ** 2 * cp * sp + (mc + mp) * grav * sp) / (l * d)
        return np.column_stack([X[:, 1], xdd, phd, phdd])

    def g(X):
        X = np.atleast_2d(X)
        ph = X[:, 2]
        d = mc + mp * np.sin(ph) ** 2
        G = np.zeros((X.shape[0], 4, 1))
        G[:, 1, 0] = 1.0 / d
        G[:, 3, 0] = -np.cos(ph) / (l * d)
        return G

    def kappa(X):
        return (np.atleast_2d(X) @ K)[:, None]

    return DynamicsModel(
        name="cartpole", n=4, m=1, f=f, g=g, kappa=kappa,
        input_set=Polytope.box([-30.0], [30.0]),
        domain=Polytope.box(-np.ones(4), np.ones(4)),
    )


BUILTINS = {"pendulum": _pendulum, "poly2d": _poly2d, "cartpole": _cartpole}


def builtin(name: str) -> DynamicsModel:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(BUILTINS)}") from None


def linear_system(A, domain: Polytope, name: str = "linear") -> DynamicsModel:
    """Autonomous ``xdot = A x`` on ``domain`` (handy for tests and examples)."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    return DynamicsModel(
        name=name, n=n, m=0,
        f=lambda X: np.atleast_2d(X) @ A.T,
        g=lambda X: np.zeros((np.atleast_2d(X).shape[0], n, 0)),
        kappa=lambda X: np.zeros((np.atleast_2d(X).shape[0], 0)),
        input_set=Polytope(np.zeros((0, 0)), np.zeros(0)),
        domain=domain,
    )
