"""
Brute-force oracles for tests.

Nothing here reuses the evaluation, adjacency or rank code of the modules it
checks: B-splines come from the plain recursive definition, element
neighbourhoods from shared physical corner points, and interface smoothness
from finite differences in physical space.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .mptopology import MultiPatchGeometry, Patch

RANK_TOL = 1e-9


@dataclass(frozen=True)
class RankProbe:
    """Sample grid of ``per_dir x per_dir`` points per element and the relative rank threshold."""

    per_dir: int
    tol: float = RANK_TOL

    def __post_init__(self):
        if self.per_dir < 2:
            raise ValueError("need at least two samples per direction")


def cox_de_boor(knots, p: int, x: float) -> np.ndarray:
    """All degree-``p`` B-splines of ``knots`` at the scalar ``x`` (right end included)."""
    t = [float(v) for v in knots]
    last = t[-1]
    N = [1.0 if (t[j] <= x < t[j + 1]) or (x == last and t[j] < t[j + 1] == last) else 0.0
         for j in range(len(t) - 1)]
    for d in range(1, p + 1):
        nxt = []
        for j in range(len(t) - 1 - d):
            left = (x - t[j]) / (t[j + d] - t[j]) * N[j] if t[j + d] > t[j] else 0.0
            right = (t[j + d + 1] - x) / (t[j + d + 1] - t[j + 1]) * N[j + 1] if t[j + d + 1] > t[j + 1] else 0.0
            nxt.append(left + right)
        N = nxt
    return np.array(N)


def extraction_evaluator(coeffs: dict, knots, p: int):
    """Callable ``f(patch, xi) -> values`` of a function given as ``{patch: block}``.

    Blocks need attributes ``o1``, ``o2`` and a dense array ``c``.
    """
    def f(patch, xi):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        blk = coeffs.get(patch)
        out = np.zeros(len(xi))
        if blk is None:
            return out
        r1 = slice(blk.o1, blk.o1 + blk.c.shape[0])
        r2 = slice(blk.o2, blk.o2 + blk.c.shape[1])
        for m, (x, y) in enumerate(xi):
            out[m] = cox_de_boor(knots, p, x)[r1] @ blk.c @ cox_de_boor(knots, p, y)[r2]
        return out
    return f


def sum_evaluator(parts):
    """Linear combination ``[(coef, f), ...]`` of evaluators."""
    def f(patch, xi):
        return sum(c * g(patch, xi) for c, g in parts)
    return f


def collocation_rank(functions, elements, probe: RankProbe) -> int:
    """Numerical rank of the sample matrix over ``elements = [(patch, (a0, a1), (b0, b1))]``."""
    s = (np.arange(probe.per_dir) + 0.5) / probe.per_dir
    blocks = []
    for patch, (a0, a1), (b0, b1) in elements:
        X = np.array([(a0 + (a1 - a0) * u, b0 + (b1 - b0) * v) for u in s for v in s])
        blocks.append(np.stack([f(patch, X) for f in functions], 1))
    M = np.vstack(blocks)
    sv = np.linalg.svd(M, compute_uv=False)
    if len(sv) == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > probe.tol * sv[0]))


def invert(patch: Patch, x, guess, iters: int = 50) -> np.ndarray:
    """Parameter of the physical point ``x`` by Newton's method."""
    xi = np.array(guess, dtype=float)
    for _ in range(iters):
        pt, jac, _ = patch.evaluate(np.clip(xi, 0, 1)[None], 1)
        step = np.linalg.solve(jac[0], x - pt[0])
        xi = xi + step
        if np.linalg.norm(step) < 1e-15:
            break
    return np.clip(xi, 0.0, 1.0)


def _side_params(side, s):
    c = 0.0 if side in (0, 2) else 1.0
    return np.array([c, s]) if side in (0, 1) else np.array([s, c])


def _inward(side):
    return {0: (1, 0), 1: (-1, 0), 2: (0, 1), 3: (0, -1)}[side]


def fd_smoothness(geom: MultiPatchGeometry, f, edge: int, samples: int = 9, h: float = 1e-5):
    """Largest value jump and normal-derivative jump of ``f`` across an inner edge.

    ``f(patch, xi)`` evaluates on one patch. Normal derivatives are one-sided
    third-order differences along the physical normal.
    """
    sides = [(i, s) for (i, s), e in geom.side_edge.items() if e == edge]
    if len(sides) != 2:
        raise ValueError(f"edge {edge} is not an inner edge")
    (i0, s0), (i1, s1) = sides
    P0, P1 = geom.patches[i0], geom.patches[i1]
    vjump = djump = 0.0
    for s in np.linspace(0.05, 0.95, samples):
        xi0 = _side_params(s0, s)
        x, jac, _ = P0.evaluate(xi0[None], 1)
        x, jac = x[0], jac[0]
        # start the inversion from the closest sampled point of the other side
        cand = [_side_params(s1, t) for t in np.linspace(0, 1, 21)]
        pc = P1.evaluate(np.array(cand), 0)[0]
        xi1 = invert(P1, x, cand[int(np.argmin(np.linalg.norm(pc - x, axis=1)))])
        vjump = max(vjump, abs(f(i0, xi0[None])[0] - f(i1, xi1[None])[0]))
        # physical unit normal pointing into patch i0
        tang = jac[:, 1] if s0 in (0, 1) else jac[:, 0]
        nrm = np.array([tang[1], -tang[0]]) / np.linalg.norm(tang)
        if nrm @ (jac @ np.array(_inward(s0), dtype=float)) < 0:
            nrm = -nrm

        def one_sided(P, i, xi_start, sign):
            vals = []
            for m in range(4):
                y = x + sign * m * h * nrm
                vals.append(f(i, invert(P, y, xi_start)[None])[0])
            return sign * (-11 * vals[0] + 18 * vals[1] - 9 * vals[2] + 2 * vals[3]) / (6 * h)

        d0 = one_sided(P0, i0, xi0, 1.0)
        d1 = one_sided(P1, i1, xi1, -1.0)
        djump = max(djump, abs(d0 - d1))
    return vjump, djump


def corner_jets(geom: MultiPatchGeometry, f, patch: int, code, p: int, h: float):
    """Physical value, gradient and Hessian of ``f`` at a patch corner.

    ``f`` restricted to the corner element ``[0, h]^2`` (local coordinates of
    ``code``) is a polynomial of bidegree ``p``; it is recovered exactly by a
    least-squares fit and the parametric derivatives are pushed forward with
    the chain rule.
    """
    t = np.linspace(0, h, p + 3)
    loc = np.array([(x, y) for x in t for y in t])
    vals = f(patch, code.to_patch(loc))
    V = np.stack([loc[:, 0] ** a * loc[:, 1] ** b for a in range(p + 1) for b in range(p + 1)], 1)
    cf = np.linalg.lstsq(V, vals, rcond=None)[0].reshape(p + 1, p + 1)
    g = np.array([cf[1, 0], cf[0, 1]])
    H = np.array([[2 * cf[2, 0], cf[1, 1]], [cf[1, 1], 2 * cf[0, 2]]])
    _, J, Hg = geom.local_patch(patch, code).evaluate(np.zeros((1, 2)), 2)
    J, Hg = J[0], Hg[0]
    gp = np.linalg.solve(J.T, g)
    rhs = H - np.einsum("i,iab->ab", gp, Hg)
    Hp = np.linalg.solve(J.T, np.linalg.solve(J.T, rhs).T).T
    return cf[0, 0], gp, Hp


class CornerGraph:
    """Element adjacency of one level from shared physical corner points."""

    def __init__(self, geom: MultiPatchGeometry, k0: int, level: int, digits: int = 9):
        self.level = level
        n = (k0 + 1) << level
        self.nodes: dict = {}
        self.corners: dict = {}
        self._rings: dict = {}
        g = np.arange(n + 1) / n
        for i, patch in enumerate(geom.patches):
            X = np.array([(u, v) for u in g for v in g])
            P = np.round(patch.evaluate(X, 0)[0], digits) + 0.0
            key = {(a, b): tuple(P[a * (n + 1) + b]) for a in range(n + 1) for b in range(n + 1)}
            for a in range(n):
                for b in range(n):
                    el = (level, i, a, b)
                    cs = [key[(a + x, b + y)] for x in (0, 1) for y in (0, 1)]
                    self.corners[el] = cs
                    for c in cs:
                        self.nodes.setdefault(c, set()).add(el)

    def neighbours(self, el):
        out = set()
        for c in self.corners[el]:
            out |= self.nodes[c]
        out.discard(el)
        return out

    def rings(self, src) -> dict:
        if src in self._rings:
            return self._rings[src]
        dist = {src: 0}
        todo = deque([src])
        while todo:
            q = todo.popleft()
            for r in self.neighbours(q):
                if r not in dist:
                    dist[r] = dist[q] + 1
                    todo.append(r)
        self._rings[src] = dist
        return dist


def bfs_distance(geom: MultiPatchGeometry, k0: int, q, q2, graphs: dict | None = None) -> Fraction:
    """Multilevel element distance from breadth-first rings on the finer level."""
    if q[0] < q2[0]:
        q, q2 = q2, q
    lv = q[0]
    graphs = {} if graphs is None else graphs
    if lv not in graphs:
        graphs[lv] = CornerGraph(geom, k0, lv)
    rings = graphs[lv].rings(tuple(q))
    s = lv - q2[0]
    m = 1 << s
    targets = [(lv, q2[1], (q2[2] << s) + x, (q2[3] << s) + y) for x in range(m) for y in range(m)]
    return Fraction(max(rings[t] for t in targets), 1 << lv)
