"""Zero level sets of 2D barriers as SVG, via marching squares."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

GRID = 400
COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf"]

# edges of a square cell, corners ordered (0,0) (1,0) (1,1) (0,1)
_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0))
_CASES = {
    1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)], 6: [(0, 2)], 7: [(3, 2)],
    8: [(2, 3)], 9: [(0, 2)], 11: [(1, 2)], 12: [(1, 3)], 13: [(0, 1)], 14: [(3, 0)],
}


def marching_squares(xs: np.ndarray, ys: np.ndarray, F: np.ndarray, level: float = 0.0) -> list[np.ndarray]:
    """Polylines of ``{F = level}`` for ``F[i, j]`` sampled at ``(xs[i], ys[j])``.

    Saddle cells are resolved with the cell-centre average.
    """
    G = F - level
    pos = G >= 0
    code = pos[:-1, :-1] * 1 + pos[1:, :-1] * 2 + pos[1:, 1:] * 4 + pos[:-1, 1:] * 8
    segments = []
    for i, j in zip(*np.nonzero((code != 0) & (code != 15))):
        case = int(code[i, j])
        c = (G[i, j], G[i + 1, j], G[i + 1, j + 1], G[i, j + 1])
        if case in (5, 10):
            positives_joined = sum(c) / 4.0 >= 0
            pairs = [(0, 1), (2, 3)] if (case == 5) == positives_joined else [(3, 0), (1, 2)]
        else:
            pairs = _CASES[case]
        corners = ((xs[i], ys[j]), (xs[i + 1], ys[j]), (xs[i + 1], ys[j + 1]), (xs[i], ys[j + 1]))
        for ea, eb in pairs:
            p, q = _cross(corners, c, ea), _cross(corners, c, eb)
            if _key(p) != _key(q):  # the level passing exactly through a grid node
                segments.append((p, q))
    return _join(segments)


def _cross(corners, vals, edge):
    a, b = _EDGES[edge]
    if corners[b] < corners[a]:  # same arithmetic from both cells sharing the edge
        a, b = b, a
    va, vb = vals[a], vals[b]
    w = 0.5 if va == vb else va / (va - vb)
    pa, pb = corners[a], corners[b]
    return (pa[0] + w * (pb[0] - pa[0]), pa[1] + w * (pb[1] - pa[1]))


def _key(p):
    return (round(p[0], 9), round(p[1], 9))


def _join(segments) -> list[np.ndarray]:
    """Chain segments sharing endpoints into polylines."""
    ends = defaultdict(list)
    for k, (p, q) in enumerate(segments):
        ends[_key(p)].append(k)
        ends[_key(q)].append(k)
    used = np.zeros(len(segments), dtype=bool)
    lines = []
    for start in range(len(segments)):
        if used[start]:
            continue
        used[start] = True
        chain = [segments[start][0], segments[start][1]]
        for forward in (True, False):
            while True:
                tip = chain[-1] if forward else chain[0]
                nxt = next((k for k in ends[_key(tip)] if not used[k]), None)
                if nxt is None:
                    break
                used[nxt] = True
                p, q = segments[nxt]
                other = q if _key(p) == _key(tip) else p
                if forward:
                    chain.append(other)
                else:
                    chain.insert(0, other)
        lines.append(np.array(chain))
    return lines


def level_set_svg(barrier, path, grid: int = GRID, title: str = "", size: int = 600, markers=None) -> dict:
    """Write each member's zero level set and the union's as SVG polylines.

    ``markers`` is an optional list of ``(label, lo, hi, colour)`` boxes drawn
    underneath (unsafe or initial sets). Returns the number of polylines per
    curve.
    """
    lo, hi = barrier.domain.bbox
    xs = np.linspace(lo[0], hi[0], grid)
    ys = np.linspace(lo[1], hi[1], grid)
    P = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    vals, _ = barrier.member_values(P)
    curves = []
    for k, m in enumerate(barrier.members):
        curves.append((f"alpha={m.alpha:g}", vals[k].reshape(grid, grid), COLORS[k % len(COLORS)], 1.5, "6,3"))
    curves.append(("union", vals.max(axis=0).reshape(grid, grid), "#d62728", 2.5, None))

    def sx(x):
        return (x - lo[0]) / (hi[0] - lo[0]) * size

    def sy(y):
        return size - (y - lo[1]) / (hi[1] - lo[1]) * size

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size + 40}" '
        f'viewBox="-10 -30 {size + 170} {size + 40}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    if title:
        out.append(f'<text x="0" y="-10" font-family="sans-serif" font-size="14">{title}</text>')
    for label, blo, bhi, colour in markers or []:
        x0, x1, y0, y1 = sx(blo[0]), sx(bhi[0]), sy(bhi[1]), sy(blo[1])
        out.append(f'<rect x="{x0:.2f}" y="{y0:.2f}" width="{x1 - x0:.2f}" height="{y1 - y0:.2f}" '
                   f'fill="{colour}" fill-opacity="0.3"><title>{label}</title></rect>')
    counts = {}
    for row, (label, F, colour, width, dash) in enumerate(curves):
        lines = marching_squares(xs, ys, F)
        counts[label] = len(lines)
        style = f'fill="none" stroke="{colour}" stroke-width="{width}"' + (f' stroke-dasharray="{dash}"' if dash else "")
        for line in lines:
            pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in line)
            out.append(f'<polyline class="{label}" points="{pts}" {style}/>')
        ly = 20 + 20 * row
        out.append(f'<line x1="{size + 15}" y1="{ly}" x2="{size + 45}" y2="{ly}" {style}/>')
        out.append(f'<text x="{size + 50}" y="{ly + 4}" font-family="sans-serif" font-size="12">{label}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
    return counts


class _Box:
    def __init__(self, lo, hi):
        self.bbox = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))


class SliceView:
    """Two coordinates of a higher-dimensional barrier, the others held fixed.

    Quacks like a barrier as far as :func:`level_set_svg` is concerned.
    """

    def __init__(self, barrier, axes=(0, 1), at=None):
        self.barrier = barrier
        self.axes = tuple(axes)
        self.at = np.zeros(barrier.dim) if at is None else np.asarray(at, dtype=float)
        lo, hi = barrier.domain.bbox
        self.domain = _Box(lo[list(self.axes)], hi[list(self.axes)])
        self.members = barrier.members

    def lift(self, P) -> np.ndarray:
        P = np.atleast_2d(P)
        X = np.tile(self.at, (P.shape[0], 1))
        X[:, self.axes] = P
        return X

    def member_values(self, P):
        return self.barrier.member_values(self.lift(P))
