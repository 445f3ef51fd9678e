"""One-hidden-layer ReLU surrogates and their exact piecewise-affine form."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import TOL, Partition, Polytope
from .lp import LpProblem, solve_lp

MAX_REGIONS = 50_000


class OutOfDomain(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class RegionExplosion(RuntimeError):
    pass


@dataclass
class ReluNetwork:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    report: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
        self.b1 = np.asarray(self.b1, dtype=float).ravel()
        self.W2 = np.atleast_2d(np.asarray(self.W2, dtype=float))
        self.b2 = np.asarray(self.b2, dtype=float).ravel()
        h, n = self.W1.shape
        if h < 1 or self.b1.size != h or self.W2.shape != (n, h) or self.b2.size != n:
            raise ValueError("inconsistent network shapes")
        if not all(np.all(np.isfinite(a)) for a in (self.W1, self.b1, self.W2, self.b2)):
            raise ValueError("network weights must be finite")

    @property
    def width(self) -> int:
        return self.W1.shape[0]

    @property
    def n(self) -> int:
        return self.W1.shape[1]

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        H = np.maximum(X @ self.W1.T + self.b1, 0.0)
        return H @ self.W2.T + self.b2

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_dict(cls, d: dict) -> "ReluNetwork":
        return cls(d["W1"], d["b1"], d["W2"], d["b2"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ReluNetwork":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class PwaFunction:
    """Affine pieces on the cells of a partition.

    ``A`` is ``(cells, out, n)`` with ``a`` ``(cells, out)`` for vector fields,
    or ``(cells, n)`` with ``a`` ``(cells,)`` for scalar functions.
    Points on shared facets evaluate with the lowest-index containing cell.
    """

    def __init__(self, partition: Partition, A, a):
        self.partition = partition
        self.A = np.asarray(A, dtype=float)
        self.a = np.asarray(a, dtype=float)
        if self.A.shape[0] != len(partition) or self.a.shape[0] != len(partition):
            raise ValueError("one affine piece per cell required")

    @property
    def is_scalar(self) -> bool:
        return self.A.ndim == 2

    def piece_values(self, cell_ids, X) -> np.ndarray:
        """Evaluate piece ``cell_ids[k]`` at ``X[k]``."""
        X = np.atleast_2d(X)
        if self.is_scalar:
            return np.einsum("kn,kn->k", self.A[cell_ids], X) + self.a[cell_ids]
        return np.einsum("kmn,kn->km", self.A[cell_ids], X) + self.a[cell_ids]

    def evaluate(self, X, tol: float = TOL) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ids = self.partition.locate(X, tol)
        if np.any(ids < 0):
            raise OutOfDomain("out of domain")
        return self.piece_values(ids, X)

    def __call__(self, x):
        return eval_pwa(self, x)

    def continuity_defect(self) -> float:
        """Largest disagreement between pieces at any shared vertex."""
        vt = self.partition.vertex_table
        worst = 0.0
        for k, cells in enumerate(vt.containing):
            if cells.size < 2:
                continue
            vals = self.piece_values(cells, np.repeat(vt.points[k][None], cells.size, axis=0))
            worst = max(worst, float(np.max(np.ptp(np.atleast_2d(vals.T), axis=-1))))
        return worst

    def to_dict(self) -> dict:
        return {"partition": self.partition.to_dict(), "A": self.A.tolist(), "a": self.a.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PwaFunction":
        return cls(Partition.from_dict(d["partition"]), d["A"], d["a"])


def eval_pwa(f: PwaFunction, x):
    """Value of ``f`` at a single point (scalar or vector)."""
    out = f.evaluate(np.asarray(x, dtype=float)[None, :])[0]
    return float(out) if f.is_scalar else out


def _region_is_open(E: np.ndarray, e: np.ndarray, n: int) -> bool:
    """True when ``{E x + e >= 0}`` contains a ball of positive radius."""
    norms = np.linalg.norm(E, axis=1)
    zero = norms <= 1e-14
    if np.any(e[zero] <= 0.0):
        return False
    E, e, norms = E[~zero], e[~zero], norms[~zero]
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.column_stack([-E, norms])
    lb = np.full(n + 1, -np.inf)
    lb[-1] = 0.0
    ub = np.full(n + 1, np.inf)
    ub[-1] = 1.0
    sol = solve_lp(LpProblem(c, A, e, lb=lb, ub=ub))
    return sol.ok and sol.x[-1] > 1e-9


def relu_to_pwa(net: ReluNetwork, domain: Polytope) -> PwaFunction:
    """Exact PWA form of ``net`` on ``domain``: one cell per activation region.

    Regions are found breadth-first by flipping one neuron at a time from the
    pattern at the domain centroid; each candidate is kept only if its region
    meets the domain in a set with nonempty interior.
    """
    n, h = net.n, net.width
    W1, b1 = net.W1, net.b1

    def region(pattern):
        sgn = np.where(pattern, 1.0, -1.0)
        return np.vstack([domain.E, sgn[:, None] * W1]), np.concatenate([domain.e, sgn * b1])

    start = tuple(bool(v) for v in (W1 @ domain.centroid + b1 > 0))
    if not _region_is_open(*region(np.array(start)), n):
        rng = np.random.default_rng(0)
        lo, hi = domain.bbox
        for _ in range(1000):
            x = rng.uniform(lo, hi)
            if domain.contains(x):
                start = tuple(bool(v) for v in (W1 @ x + b1 > 0))
                if _region_is_open(*region(np.array(start)), n):
                    break
        else:
            raise RuntimeError("could not find an interior activation region")

    seen = {start}
    found = [start]
    queue = deque([start])
    while queue:
        pat = queue.popleft()
        for i in range(h):
            nxt = list(pat)
            nxt[i] = not nxt[i]
            nxt = tuple(nxt)
            if nxt in seen:
                continue
            seen.add(nxt)
            if _region_is_open(*region(np.array(nxt)), n):
                found.append(nxt)
                queue.append(nxt)
                if len(found) > MAX_REGIONS:
                    raise RegionExplosion("region explosion")

    found.sort()
    cells, A, a = [], [], []
    for pat in found:
        E, e = region(np.array(pat))
        cells.append(Polytope(E, e).reduced())
        D = np.asarray(pat, dtype=float)
        A.append(net.W2 @ (D[:, None] * W1))
        a.append(net.W2 @ (D * b1) + net.b2)
    part = Partition(cells, domain, tags=[("relu",) + tuple(int(v) for v in p) for p in found])
    return PwaFunction(part, np.array(A), np.array(a))


def sample_domain(domain: Polytope, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples of a polytope by rejection from its bounding box."""
    lo, hi = domain.bbox
    out = []
    have = 0
    while have < count:
        X = rng.uniform(lo, hi, size=(max(2 * (count - have), 16), lo.size))
        X = X[domain.contains(X)]
        out.append(X)
        have += X.shape[0]
    return np.vstack(out)[:count]


def grid_points(domain: Polytope, target: int = 10_000) -> np.ndarray:
    lo, hi = domain.bbox
    k = max(2, int(round(target ** (1.0 / lo.size))))
    axes = [np.linspace(l, u, k) for l, u in zip(lo, hi)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
    return G[domain.contains(G)]


def fit_surrogate(
    dyn,
    width: int,
    samples: int,
    seed: int,
    epochs: int = 20_000,
    lr: float = 0.05,
    momentum: float = 0.9,
) -> ReluNetwork:
    """Fit a ReLU network to the saturated closed-loop field of ``dyn``.

    Full-batch gradient descent with heavy-ball momentum on normalised data,
    a fixed step schedule (halved at 50% and 75% of the epochs) and a final
    least-squares solve for the output layer. Deterministic given ``seed``.
    """
    if width < 1:
        raise ValueError("width must be at least 1")
    if samples < 10 * width:
        raise ValueError("need at least 10 samples per hidden neuron")
    rng = np.random.default_rng(seed)
    X = sample_domain(dyn.domain, samples, rng)
    Y = dyn.closed_loop(X)
    n = X.shape[1]

    lo, hi = dyn.domain.bbox
    xc, xs = (lo + hi) / 2.0, (hi - lo) / 2.0
    ym, ys = Y.mean(axis=0), Y.std(axis=0)
    ys = np.where(ys > 1e-12, ys, 1.0)
    Z = (X - xc) / xs
    T = (Y - ym) / ys

    dirs = rng.normal(size=(width, n))
    W = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * np.sqrt(2.0)
    anchors = rng.uniform(-0.8, 0.8, size=(width, n))
    b = -np.einsum("hn,hn->h", W, anchors)
    V = rng.normal(scale=1.0 / np.sqrt(width), size=(n, width))
    d = np.zeros(n)

    params = [W, b, V, d]
    vel = [np.zeros_like(p) for p in params]
    N = Z.shape[0]
    loss = np.inf
    for epoch in range(epochs):
        step = lr * (0.5 ** ((epoch >= epochs // 2) + (epoch >= 3 * epochs // 4)))
        pre = Z @ W.T + b
        H = np.maximum(pre, 0.0)
        R = H @ V.T + d - T
        loss = float(np.mean(R ** 2))
        if not np.isfinite(loss):
            raise TrainingDiverged("training diverged")
        gR = 2.0 * R / (N * n)
        gV = gR.T @ H
        gd = gR.sum(axis=0)
        gH = (gR @ V) * (pre > 0)
        gW = gH.T @ Z
        gb = gH.sum(axis=0)
        for p, v, g in zip(params, vel, (gW, gb, gV, gd)):
            v *= momentum
            v -= step * g
            p += v

    H1 = np.column_stack([np.maximum(Z @ W.T + b, 0.0), np.ones(N)])
    coef, *_ = np.linalg.lstsq(H1, T, rcond=None)
    V, d = coef[:-1].T, coef[-1]
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(d))):
        raise TrainingDiverged("training diverged")

    W1 = W / xs
    b1 = b - W1 @ xc
    W2 = ys[:, None] * V
    b2 = ys * d + ym
    net = ReluNetwork(W1, b1, W2, b2)
    G = grid_points(dyn.domain)
    resid = np.abs(net(G) - dyn.closed_loop(G))
    net.report = {
        "train_mse": float(np.mean((net(X) - Y) ** 2)),
        "holdout_max_residual": float(resid.max()),
        "holdout_points": int(G.shape[0]),
        "epochs": epochs,
        "seed": seed,
    }
    return net
