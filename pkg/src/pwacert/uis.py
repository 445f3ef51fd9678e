"""Union of invariant sets: max-composition of barriers certified at several slopes.

Each member is a PWA barrier certified with its own linear class-K slope.
The composed barrier ``hbar = max_i h_i`` has super-level set equal to the
union of the members' sets and satisfies the barrier condition with the
two-slope ("leaky") function built from the smallest and largest slopes.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import Partition, Polytope, product_partition, same_domain
from .relu import OutOfDomain, PwaFunction, sample_domain
from .synthesis import SynthesisConfig, SynthesisResult, UncertaintyMap, synthesize

log = logging.getLogger(__name__)


class NoCertifiedMember(RuntimeError):
    def __init__(self, message, results=()):
        super().__init__(message)
        self.results = list(results)


@dataclass(frozen=True)
class LeakyAlpha:
    """Two-slope class-K function: ``alpha_max * s`` for ``s >= 0``, ``alpha_min * s`` below."""

    alpha_min: float
    alpha_max: float

    def __post_init__(self):
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 < alpha_min <= alpha_max")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.where(s >= 0, self.alpha_max * s, self.alpha_min * s)
        return float(out) if out.ndim == 0 else out


def eval_alpha_bar(a: LeakyAlpha, s):
    return a(s)


@dataclass(frozen=True)
class Member:
    barrier: PwaFunction
    alpha: float

    @property
    def partition(self) -> Partition:
        return self.barrier.partition


class UisBarrier:
    """``hbar(x) = max_i h_i(x)`` over certified members.

    Ties go to the member with the largest index. Evaluation locates the
    point in each member's own partition; the common refinement of all member
    partitions is only built when facets are needed.
    """

    def __init__(self, members, report: dict | None = None):
        self.members = tuple(members)
        if not self.members:
            raise ValueError("a UIS barrier needs at least one member")
        dom = self.members[0].partition.domain
        for m in self.members[1:]:
            if not same_domain(dom, m.partition.domain):
                raise ValueError("members must share the domain")
        slopes = [m.alpha for m in self.members]
        self.alpha_bar_fn = LeakyAlpha(min(slopes), max(slopes))
        self.report = dict(report or {})

    @classmethod
    def from_results(cls, results, report: dict | None = None) -> "UisBarrier":
        return cls([Member(r.barrier, r.alpha) for r in results], report)

    @property
    def domain(self) -> Polytope:
        return self.members[0].partition.domain

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def alphas(self) -> list[float]:
        return [m.alpha for m in self.members]

    def alpha_bar(self, h):
        return self.alpha_bar_fn(h)

    def member_values(self, X) -> tuple[np.ndarray, np.ndarray]:
        """``(values, cells)`` per member, each ``(members, points)``; raises outside D."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        vals = np.empty((len(self.members), X.shape[0]))
        cells = np.empty((len(self.members), X.shape[0]), dtype=int)
        for k, m in enumerate(self.members):
            ids = m.partition.locate(X)
            if np.any(ids < 0):
                raise OutOfDomain("out of domain")
            cells[k] = ids
            vals[k] = m.barrier.piece_values(ids, X)
        return vals, cells

    def evaluate(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(hbar, active member, active cell)`` for a batch of points."""
        vals, cells = self.member_values(X)
        # argmax on the reversed stack picks the largest index among ties
        rev = vals[::-1]
        active = len(self.members) - 1 - np.argmax(rev, axis=0)
        cols = np.arange(vals.shape[1])
        return vals[active, cols], active, cells[active, cols]

    def gradients(self, active, cells) -> np.ndarray:
        return np.array([self.members[k].barrier.A[c] for k, c in zip(active, cells)])

    def value_and_gradient(self, x) -> tuple[float, np.ndarray]:
        h, k, c = self.evaluate(np.asarray(x, dtype=float)[None, :])
        return float(h[0]), self.members[k[0]].barrier.A[c[0]].copy()

    def value_and_gradient_batch(self, X) -> tuple[np.ndarray, np.ndarray]:
        h, k, c = self.evaluate(X)
        return h, self.gradients(k, c)

    def contains(self, X) -> np.ndarray:
        return self.evaluate(X)[0] >= 0

    @cached_property
    def product_partition(self) -> Partition:
        """Common refinement of the member partitions.

        Tags are tuples holding the containing cell index in each member.
        """
        part = self.members[0].partition
        tags = [(i,) for i in range(len(part))]
        for m in self.members[1:]:
            prod = product_partition(part, m.partition)
            tags = [tags[i] + (j,) for i, j in prod.tags]
            part = prod
        return Partition(part.cells, part.domain, tags)

    def to_dict(self) -> dict:
        return {
            "alpha_bar": {"alpha_min": self.alpha_bar_fn.alpha_min, "alpha_max": self.alpha_bar_fn.alpha_max},
            "members": [{"alpha": m.alpha, "barrier": m.barrier.to_dict()} for m in self.members],
            "report": self.report,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UisBarrier":
        members = [Member(PwaFunction.from_dict(m["barrier"]), float(m["alpha"])) for m in d["members"]]
        return cls(members, d.get("report"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "UisBarrier":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def eval_union_barrier(b: UisBarrier, x) -> tuple[float, int, int]:
    h, k, c = b.evaluate(np.asarray(x, dtype=float)[None, :])
    return float(h[0]), int(k[0]), int(c[0])


def barrier_condition_residual(b: UisBarrier, flow, x) -> float:
    """``s^T flow + alpha_bar(hbar(x))`` with ``s`` the active piece's gradient."""
    h, s = b.value_and_gradient(x)
    return float(s @ np.asarray(flow, dtype=float)) + b.alpha_bar(h)


def alpha_grid_around(center: float, steps: int = 1, ratio: float = 1.5) -> list[float]:
    """Geometric grid ``center * ratio**k`` for ``k`` in ``-steps..steps``."""
    if center <= 0 or ratio <= 1 or steps < 0:
        raise ValueError("need center > 0, ratio > 1, steps >= 0")
    return [center * ratio ** k for k in range(-steps, steps + 1)]


def uis_sweep(
    dyn_pwa: PwaFunction,
    base_partition: Partition,
    alpha_grid,
    cfg: SynthesisConfig,
    unc: UncertaintyMap | None = None,
    workers: int = 1,
) -> tuple[UisBarrier, list[SynthesisResult]]:
    """Synthesize one barrier per slope and compose the certified ones.

    Returns the UIS barrier and every synthesis result (certified or not).
    """
    grid = [float(a) for a in alpha_grid]
    if not grid:
        raise ValueError("alpha grid is empty")
    if any(a <= 0 for a in grid):
        raise ValueError("alpha grid must be positive")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("alpha grid must be strictly ascending")

    def run(alpha):
        return synthesize(dyn_pwa, base_partition, cfg.with_alpha(alpha), unc)

    if workers > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(grid))) as pool:
            results = list(pool.map(run, grid))
    else:
        results = [run(a) for a in grid]
    good = [r for r in results if r.certified]
    for r in results:
        log.info("alpha=%g certified=%s cells=%d", r.alpha, r.certified, len(r.partition))
    if not good:
        raise NoCertifiedMember("no certified invariant set for any α in grid", results)
    report = {
        "alpha_grid": grid,
        "admitted": [r.alpha for r in good],
        "rejected": [r.alpha for r in results if not r.certified],
    }
    return UisBarrier.from_results(good, report), results


# set size


def _clip_area(cell: Polytope, pieces) -> float:
    """Area of ``{x in cell : s.x + t <= 0 for every (s, t) in pieces}``."""
    E = np.array([-s for s, _ in pieces])
    e = np.array([-t for _, t in pieces])
    q = cell.with_halfspaces(E, e)
    if q.is_empty or q.affine_dim < cell.dim:
        return 0.0
    return q.volume


def member_area(m: Member) -> float:
    """Exact area of ``{h >= 0}`` for a 2D member."""
    part = m.partition
    if part.dim != 2:
        raise ValueError("exact areas are for 2D barriers")
    total = 0.0
    for i, cell in enumerate(part.cells):
        total += cell.volume - _clip_area(cell, [(m.barrier.A[i], m.barrier.a[i])])
    return total


def union_area(b: UisBarrier) -> float:
    """Exact area of the union of member sets for a 2D barrier.

    Inside one cell of the common refinement the complement of the union is
    the convex set where every member piece is non-positive.
    """
    if b.dim != 2:
        raise ValueError("exact areas are for 2D barriers")
    part = b.product_partition
    total = 0.0
    for cell, tag in zip(part.cells, part.tags):
        pieces = [(b.members[k].barrier.A[c], b.members[k].barrier.a[c]) for k, c in enumerate(tag)]
        total += cell.volume - _clip_area(cell, pieces)
    return total


def wilson_interval(hits: int, n: int, z: float = 1.959964) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = hits / n
    d = 1 + z * z / n
    c = (p + z * z / (2 * n)) / d
    w = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / d
    return max(0.0, c - w), min(1.0, c + w)


def enlargement_report(b: UisBarrier, samples: int = 100_000, seed: int = 0) -> dict:
    """Size of the union against each member: exact in 2D, Monte Carlo otherwise."""
    if b.dim == 2:
        members = [member_area(m) for m in b.members]
        union = union_area(b)
        return {
            "method": "exact",
            "member_sizes": members,
            "union_size": union,
            "not_smaller": bool(union >= max(members) - 1e-9),
            "strict": bool(union > max(members) + 1e-9),
        }
    X = sample_domain(b.domain, samples, np.random.default_rng(seed))
    vals, _ = b.member_values(X)
    vol = b.domain.volume
    inside = vals >= 0
    union_hits = int(np.any(inside, axis=0).sum())
    members = [int(r.sum()) for r in inside]
    lo, hi = wilson_interval(union_hits, samples)
    best = max(members)
    blo, bhi = wilson_interval(best, samples)
    return {
        "method": "monte_carlo",
        "samples": samples,
        "member_sizes": [vol * h / samples for h in members],
        "union_size": vol * union_hits / samples,
        "union_interval": [vol * lo, vol * hi],
        "not_smaller": bool(union_hits >= best),
        "strict": bool(lo > bhi),
    }
