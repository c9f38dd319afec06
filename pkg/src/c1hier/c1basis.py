"""
One-level C1 isogeometric space on an AS-G1 multi-patch domain.

Every basis function is stored through its extraction: for each patch it
touches, a dense block of coefficients over that patch's tensor-product
B-splines of :math:`S_p^r`, given with the index offset of the block.

Function keys:

``("I", patch, a1, a2)``
    patch interior function ``N_a1 N_a2``.
``("E", edge, j, t)``
    edge function; ``t = 0`` trace type, ``t = 1`` derivative type.
``("V", vertex, m)``
    vertex function, ``m`` indexing ``(0,0), (1,0), (2,0), (0,1), (1,1), (0,2)``.

Interior and edge functions are built on demand and cached, so deep levels
cost only what is used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mptopology import GeometryError, GluingData, MultiPatchGeometry, OrientationCode
from .splinecore import UnivariateSpace, modified_coeffs, refine_row

_DERIVS = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
J_CHI = ((0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (0, 2))


class TopologyError(ValueError):
    pass


@dataclass
class Block:
    o1: int
    o2: int
    c: np.ndarray

    def items(self):
        nz = np.nonzero(self.c)
        for a, b in zip(*nz):
            yield self.o1 + int(a), self.o2 + int(b), float(self.c[a, b])


def _local_block_to_patch(code: OrientationCode, blk: Block, n: int) -> Block:
    o1, o2, B = blk.o1, blk.o2, blk.c
    if code.swap:
        B, o1, o2 = B.T, o2, o1
    if code.rev_u:
        B, o1 = B[::-1], n - o1 - B.shape[0]
    if code.rev_v:
        B, o2 = B[:, ::-1], n - o2 - B.shape[1]
    return Block(o1, o2, np.ascontiguousarray(B))


def _merge(blocks: list[Block]) -> Block:
    if len(blocks) == 1:
        return blocks[0]
    lo1 = min(b.o1 for b in blocks)
    lo2 = min(b.o2 for b in blocks)
    hi1 = max(b.o1 + b.c.shape[0] for b in blocks)
    hi2 = max(b.o2 + b.c.shape[1] for b in blocks)
    C = np.zeros((hi1 - lo1, hi2 - lo2))
    for b in blocks:
        C[b.o1 - lo1:b.o1 - lo1 + b.c.shape[0], b.o2 - lo2:b.o2 - lo2 + b.c.shape[1]] += b.c
    return Block(lo1, lo2, C)


def _local_dense(basis, x, nder, lo, hi):
    """Derivative ``nder`` of basis functions ``lo..hi-1`` at ``x``, shape ``(len(x), hi-lo)``."""
    first, vals = basis.evaluate(x, nder)
    p = basis.degree
    out = np.zeros((len(x), hi - lo + 2 * (p + 1)))
    idx = np.clip(first[:, None] + np.arange(p + 1) - lo + p + 1, 0, out.shape[1] - 1)
    np.put_along_axis(out, idx, vals[:, nder, :], axis=1)
    return out[:, p + 1:p + 1 + hi - lo]


def _window(blk: "Block", a: int, b: int, m: int) -> np.ndarray:
    """The ``m x m`` coefficient window starting at global index ``(a, b)``."""
    W = np.zeros((m, m))
    h1, h2 = blk.c.shape
    r0, r1 = max(a - blk.o1, 0), min(a - blk.o1 + m, h1)
    c0, c1 = max(b - blk.o2, 0), min(b - blk.o2 + m, h2)
    if r0 < r1 and c0 < c1:
        W[r0 - (a - blk.o1):r1 - (a - blk.o1), c0 - (b - blk.o2):c1 - (b - blk.o2)] = blk.c[r0:r1, c0:c1]
    return W


def _trim(vec: np.ndarray, tol: float = 1e-13):
    nz = np.nonzero(np.abs(vec) > tol * max(1.0, np.abs(vec).max()))[0]
    if len(nz) == 0:
        return 0, np.zeros(0)
    return int(nz[0]), vec[nz[0]:nz[-1] + 1].copy()


class C1Space:
    """The space of C1 splines ``A`` of one level on a multi-patch geometry."""

    def __init__(self, geom: MultiPatchGeometry, p: int = 3, r: int | None = None, k: int = 3,
                 level: int = 0):
        self.geom = geom
        self.level = level
        self.space = UnivariateSpace(p, p - 2 if r is None else r, k)
        sp_ = self.space
        self.p, self.r, self.k = sp_.p, sp_.r, sp_.k
        self.n, self.n0, self.n1 = sp_.n, sp_.n0, sp_.n1
        self.nel = sp_.nel
        self.rho = float(modified_coeffs(self.space, "MP_r")[1, 1])
        self.I = range(2, self.n - 2)
        self.J_trace = range(3, self.n0 - 3)
        self.J_der = range(2, self.n1 - 2)
        gp, _ = np.polynomial.legendre.leggauss(self.p + 2)
        self._gauss = 0.5 * (gp + 1.0)
        self._cache: dict = {}
        self._support: dict = {}
        self._vertex_support: dict = {}
        self._patch_vertices: dict = {}
        self._on_cache: dict = {}
        self._pieces: dict = {}
        self._patch_edges: dict = {}
        for e in geom.edges:
            for side, (i, code) in enumerate(e.sides):
                self._patch_edges.setdefault(i, []).append((e.id, side, code))
        self.vertex_data = [self._vertex_data(v) for v in geom.vertices]
        for v in geom.vertices:
            for m, (i, _) in enumerate(v.fan):
                self._patch_vertices.setdefault(i, []).append((v.id, m))
        for v in geom.vertices:
            for j in range(6):
                self.coeffs(("V", v.id, j))

    def __repr__(self):
        return f"C1Space(p={self.p}, r={self.r}, k={self.k}, level={self.level}, dim={self.dim})"

    # ---- counts and ordering -------------------------------------------
    @property
    def n_interior(self):
        return len(self.I) ** 2

    @property
    def n_edge(self):
        return len(self.J_trace) + len(self.J_der)

    @property
    def dim(self):
        g = self.geom
        return g.npatch * self.n_interior + len(g.edges) * self.n_edge + 6 * len(g.vertices)

    def interior_keys(self, patch):
        return [("I", patch, a1, a2) for a1 in self.I for a2 in self.I]

    def edge_keys(self, edge):
        return [("E", edge, j, 0) for j in self.J_trace] + [("E", edge, j, 1) for j in self.J_der]

    def vertex_keys(self, vertex):
        return [("V", vertex, j) for j in range(6)]

    def keys(self):
        out = []
        for i in range(self.geom.npatch):
            out += self.interior_keys(i)
        for e in self.geom.edges:
            out += self.edge_keys(e.id)
        for v in self.geom.vertices:
            out += self.vertex_keys(v.id)
        return out

    # ---- univariate helpers --------------------------------------------
    def _project(self, fn, lo: int, hi: int) -> tuple[int, np.ndarray]:
        """Coefficients in S_p^r of a spline supported on elements ``lo..hi``."""
        B = self.space.basis
        h = 1.0 / self.nel
        x = np.concatenate([(e + self._gauss) * h for e in range(lo, hi + 1)])
        first = B.functions_on(lo)[0]
        last = B.functions_on(hi)[-1]
        cols = [j for j in range(first, last + 1)
                if B.support(j)[0] >= lo and B.support(j)[1] <= hi]
        A = _local_dense(B, x, 0, first, last + 1)[:, np.array(cols) - first]
        f = fn(x)
        c, *_ = np.linalg.lstsq(A, f, rcond=None)
        if np.abs(A @ c - f).max() > 1e-9 * (1.0 + np.abs(f).max()):
            raise ArithmeticError("projected function is not in S_p^r")
        vec = np.zeros(self.n)
        vec[cols] = c
        return _trim(vec)

    def _rp1_to_r(self, coefs_rp1: dict) -> tuple[int, np.ndarray]:
        vec = np.zeros(self.n)
        for j, c in coefs_rp1.items():
            off, row = refine_row(self.space.basis_rp1, self.space.basis, j)
            vec[off:off + len(row)] += c * row
        return _trim(vec)

    def _eval_combo(self, basis, coefs: dict, x, nder):
        lo, hi = min(coefs), max(coefs) + 1
        full = _local_dense(basis, x, nder, lo, hi)
        return sum(c * full[:, j - lo] for j, c in coefs.items())

    # ---- edge functions -------------------------------------------------
    def _edge_blocks(self, edge_id: int, j: int, t: int):
        e = self.geom.edges[edge_id]
        gd = e.gluing
        sp_ = self.space
        blocks = []
        if t == 0:
            lo, hi = sp_.basis_rp1.support(j)
            ou, u = self._rp1_to_r({j: 1.0})

            def deriv_term(b):
                return self._project(lambda x: GluingData.lin(b, x) * self._eval_combo(
                    sp_.basis_rp1, {j: 1.0}, x, 1), lo, hi)
            sides = [(0, gd.beta0)] + ([(1, gd.beta1)] if e.kind == "inner" else [])
            for side, beta in sides:
                ow, w = deriv_term(beta) if np.any(beta != 0) else (ou, np.zeros(0))
                o2 = min(ou, ow) if len(w) else ou
                L = max(ou + len(u), ow + len(w)) - o2
                C = np.zeros((2, L))
                C[0, ou - o2:ou - o2 + len(u)] = u
                C[1, ou - o2:ou - o2 + len(u)] = u
                if len(w):
                    C[1, ow - o2:ow - o2 + len(w)] -= self.rho * w
                blocks.append((side, C, o2))
        else:
            lo, hi = sp_.basis_pm1.support(j)
            sides = [(0, gd.alpha0, 1.0)] + ([(1, gd.alpha1, -1.0)] if e.kind == "inner" else [])
            for side, alpha, sgn in sides:
                ov, v = self._project(lambda x: GluingData.lin(alpha, x) * self._eval_combo(
                    sp_.basis_pm1, {j: 1.0}, x, 0), lo, hi)
                C = np.zeros((2, len(v)))
                C[1] = sgn * v
                blocks.append((side, C, ov))
        out = {}
        for side, C, off in blocks:
            i, code = e.sides[side]
            blk = Block(0, off, C) if side == 0 else Block(off, 0, C.T.copy())
            out.setdefault(i, []).append(_local_block_to_patch(code, blk, self.n))
        return {i: _merge(b) for i, b in out.items()}

    # ---- vertex functions -----------------------------------------------
    def vertex_edge_gluing(self, v, q: int) -> GluingData:
        e = self.geom.edges[v.edges[q]]
        return e.gluing if v.at_start[q] else e.gluing.reversed_swapped()

    def _local_fan_patch(self, v, m):
        i, code = v.fan[m]
        return self.geom.local_patch(i, code)

    def _edge_taylor(self, v, q: int):
        """``t, t', d, d'`` at the vertex for edge ``q`` of the fan, in vertex-local form."""
        gd = self.vertex_edge_gluing(v, q)
        nu = v.valence
        inner_vertex = v.kind == "inner"
        i0_m = (q - 1) % nu if inner_vertex else q - 1
        has_i0 = i0_m >= 0 and (inner_vertex or q >= 1)
        if has_i0:
            G0 = self._local_fan_patch(v, i0_m)
            _, J, H = G0.evaluate(np.zeros((1, 2)), 2)
            a, t = J[0, :, 0], J[0, :, 1]
            a_s, t_s = H[0, :, 0, 1], H[0, :, 1, 1]
            al, al_s = gd.alpha0[0], gd.alpha0[1] - gd.alpha0[0]
            be, be_s = gd.beta0[0], gd.beta0[1] - gd.beta0[0]
            num = a + be * t
            d = num / al
            d_s = (a_s + be_s * t + be * t_s) / al - num * al_s / al ** 2
        else:
            G1 = self._local_fan_patch(v, q)
            _, J, H = G1.evaluate(np.zeros((1, 2)), 2)
            t, b = J[0, :, 0], J[0, :, 1]
            t_s, b_s = H[0, :, 0, 0], H[0, :, 1, 0]
            al, al_s = gd.alpha1[0], gd.alpha1[1] - gd.alpha1[0]
            be, be_s = gd.beta1[0], gd.beta1[1] - gd.beta1[0]
            num = b + be * t
            d = -num / al
            d_s = -((b_s + be_s * t + be * t_s) / al - num * al_s / al ** 2)
        return t, t_s, d, d_s, gd

    def sigma(self, vertex_id: int) -> float:
        v = self.geom.vertices[vertex_id]
        total = 0.0
        for m in range(v.valence):
            _, J, _ = self._local_fan_patch(v, m).evaluate(np.zeros((1, 2)), 1)
            total += np.abs(J[0]).sum(axis=1).max()
        if total <= 0:
            raise GeometryError("vanishing gradient at vertex")
        return self.p * (self.k + 1) * v.valence / total

    def _vertex_data(self, v):
        nu = v.valence
        nedge = len(v.edges)
        tay = [self._edge_taylor(v, q) for q in range(nedge)]
        corner = []
        for m in range(nu):
            _, J, H = self._local_fan_patch(v, m).evaluate(np.zeros((1, 2)), 2)
            corner.append((J[0, :, 0], J[0, :, 1], H[0, :, 0, 1]))
        return {"taylor": tay, "corner": corner, "sigma": self.sigma(v.id)}

    @staticmethod
    def _delta_data(j):
        j1, j2 = J_CHI[j]
        d = lambda a, b: 1.0 if a == b else 0.0
        A = np.array([[d(2, j1) * d(0, j2), d(1, j1) * d(1, j2)],
                      [d(1, j1) * d(1, j2), d(0, j1) * d(2, j2)]])
        b = np.array([d(1, j1) * d(0, j2), d(0, j1) * d(1, j2)])
        c0 = d(0, j1) * d(0, j2)
        return c0, b, A

    def _profile_pieces(self, vid: int, q: int, which: int):
        """Projected building blocks along fan edge ``q``: rows indexed by the first
        three S_p^{r+1} functions (trace) and first two S_{p-1}^r functions."""
        key = (vid, q, which)
        hit = self._pieces.get(key)
        if hit is not None:
            return hit
        gd = self.vertex_data[vid]["taylor"][q][4]
        sp_ = self.space
        hi = max(sp_.basis_rp1.support(2)[1], sp_.basis_pm1.support(1)[1])
        L = sp_.basis.functions_on(hi)[-1] + 1
        if which == 0:
            alpha, beta, sgn = gd.alpha0, gd.beta0, 1.0
        else:
            alpha, beta, sgn = gd.alpha1, gd.beta1, -1.0
        T = np.zeros((3, L))
        P = np.zeros((3, L))
        D = np.zeros((2, L))

        def put(row, res):
            off, vec = res
            row[off:off + len(vec)] += vec
        for w in range(3):
            put(T[w], self._rp1_to_r({w: 1.0}))
            put(P[w], self._project(lambda x: -GluingData.lin(beta, x) * self._eval_combo(
                sp_.basis_rp1, {w: 1.0}, x, 1), 0, hi))
        for w in range(2):
            put(D[w], self._project(lambda x: sgn * GluingData.lin(alpha, x) * self._eval_combo(
                sp_.basis_pm1, {w: 1.0}, x, 0), 0, hi))
        self._pieces[key] = (T, P, D)
        return T, P, D

    def _vertex_edge_profile(self, j, vid: int, q: int, which: int):
        """Trace/derivative combination along one fan edge, as S_p^r coefficient rows.

        Returns ``(row0, row1)``: the coefficients multiplying ``N_0`` and ``N_1``
        in the transversal direction.
        """
        t, t_s, d, d_s, _ = self.vertex_data[vid]["taylor"][q]
        c0, b, A = self._delta_data(j)
        c = np.array([c0, b @ t, t @ A @ t + b @ t_s])
        dd = np.array([b @ d, t @ A @ d + b @ d_s])
        tr = c @ modified_coeffs(self.space, "MP_rp1")
        dv = dd @ modified_coeffs(self.space, "MPm1_r")[:, :2]
        T, P, D = self._profile_pieces(vid, q, which)
        row0 = tr @ T
        row1 = row0 + self.rho * (tr @ P + dv @ D)
        return row0, row1

    def _vertex_blocks(self, vid: int, j: int):
        v = self.geom.vertices[vid]
        data = self.vertex_data[vid]
        nu = v.valence
        inner = v.kind == "inner"
        c0, b, A = self._delta_data(j)
        scale = data["sigma"] ** sum(J_CHI[j])
        out = {}
        for m in range(nu):
            q_prev, q_next = m, (m + 1) % nu if inner else m + 1
            n_row0, n_row1 = self._vertex_edge_profile(j, vid, q_next, 0)
            p_row0, p_row1 = self._vertex_edge_profile(j, vid, q_prev, 1)
            L = max(len(n_row0), len(p_row0), 2)
            C = np.zeros((L, L))
            # g_next: transversal xi1, along xi2
            C[0, :len(n_row0)] += n_row0
            C[1, :len(n_row1)] += n_row1
            # g_prec: transversal xi2, along xi1
            C[:len(p_row0), 0] += p_row0
            C[:len(p_row1), 1] += p_row1
            # h: bilinear Taylor part in M_{p,r,w1}(xi1) M_{p,r,w2}(xi2)
            d1, d2, d12 = data["corner"][m]
            e = np.array([[c0, b @ d2], [b @ d1, d1 @ A @ d2 + b @ d12]])
            U = modified_coeffs(self.space, "MP_r")[:, :2]
            C[:2, :2] -= U.T @ e @ U
            i, code = v.fan[m]
            blk = _local_block_to_patch(code, Block(0, 0, scale * C), self.n)
            out.setdefault(i, []).append(blk)
        return {i: _merge(bl) for i, bl in out.items()}

    # ---- public access ----------------------------------------------------
    def coeffs(self, key) -> dict:
        """Extraction of a function: ``{patch: Block}``."""
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        kind = key[0]
        if kind == "I":
            _, i, a1, a2 = key
            res = {i: Block(a1, a2, np.ones((1, 1)))}
        elif kind == "E":
            res = self._edge_blocks(key[1], key[2], key[3])
        elif kind == "V":
            res = self._vertex_blocks(key[1], key[2])
        else:
            raise KeyError(key)
        self._cache[key] = res
        return res

    def support(self, key) -> frozenset:
        """Elements ``(patch, e1, e2)`` of this level where the function is nonzero."""
        hit = self._support.get(key)
        if hit is not None:
            return hit
        B = self.space.basis
        els = set()
        if key[0] == "I":
            _, i, a1, a2 = key
            l1, h1 = B.support(a1)
            l2, h2 = B.support(a2)
            els = {(i, x, y) for x in range(l1, h1 + 1) for y in range(l2, h2 + 1)}
        else:
            for i, blk in self.coeffs(key).items():
                for a1, a2, _ in blk.items():
                    l1, h1 = B.support(a1)
                    l2, h2 = B.support(a2)
                    els.update((i, x, y) for x in range(l1, h1 + 1) for y in range(l2, h2 + 1))
        res = frozenset(els)
        self._support[key] = res
        return res

    def functions_on(self, patch: int, e1: int, e2: int) -> list:
        """Keys of all functions that do not vanish on the given element."""
        el = (patch, e1, e2)
        hit = self._on_cache.get(el)
        if hit is not None:
            return hit
        B = self.space.basis
        out = [("I", patch, a1, a2) for a1 in B.functions_on(e1) if a1 in self.I
               for a2 in B.functions_on(e2) if a2 in self.I]
        last = self.nel - 1
        if e1 in (0, last) or e2 in (0, last):
            for eid, side, code in self._patch_edges.get(patch, ()):
                l1, l2 = code.index_to_local(e1, e2, self.nel)
                trans, along = (l1, l2) if side == 0 else (l2, l1)
                if trans != 0:
                    continue
                for j in self.space.basis_rp1.functions_on(along):
                    if j in self.J_trace and el in self.support(("E", eid, j, 0)):
                        out.append(("E", eid, j, 0))
                for j in self.space.basis_pm1.functions_on(along):
                    if j in self.J_der and el in self.support(("E", eid, j, 1)):
                        out.append(("E", eid, j, 1))
            for vid, _ in self._patch_vertices.get(patch, []):
                if el in self.vertex_footprint(vid):
                    out.extend(("V", vid, j) for j in range(6) if el in self.support(("V", vid, j)))
        out = list(dict.fromkeys(out))
        self._on_cache[el] = out
        return out

    def vertex_footprint(self, vid: int) -> frozenset:
        hit = self._vertex_support.get(vid)
        if hit is None:
            hit = frozenset().union(*(self.support(("V", vid, j)) for j in range(6)))
            self._vertex_support[vid] = hit
        return hit

    def vertex_elements(self, vid: int) -> list:
        """The elements of this level adjacent to the vertex (one per fan patch)."""
        v = self.geom.vertices[vid]
        out = []
        for i, code in v.fan:
            a, b = code.index_to_patch(0, 0, self.nel)
            out.append((i, a, b))
        return out

    # ---- evaluation -------------------------------------------------------
    def eval_param(self, key, patch: int, xi, nder: int = 0) -> np.ndarray:
        """Parametric derivatives on one patch: array ``(npts, 6)`` holding
        ``f, f_1, f_2, f_11, f_12, f_22`` (only the first ``1/3/6`` are filled)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        out = np.zeros((len(xi), 6))
        blk = self.coeffs(key).get(patch)
        if blk is None:
            return out
        B = self.space.basis
        nd = min(max(nder, 0), 2)
        f1, v1 = B.evaluate(xi[:, 0], nd)
        f2, v2 = B.evaluate(xi[:, 1], nd)
        G = self._gather(blk, f1, f2)
        for col, (d1, d2) in enumerate(_DERIVS[:(1, 3, 6)[nd]]):
            out[:, col] = np.einsum("qa,qab,qb->q", v1[:, d1], G, v2[:, d2])
        return out

    def _gather(self, blk: Block, f1, f2):
        """Coefficients ``C[f1+a, f2+b]`` for every point, zero outside the block."""
        p = self.p
        pad = p + 1
        C = np.zeros((blk.c.shape[0] + 2 * pad, blk.c.shape[1] + 2 * pad))
        C[pad:-pad, pad:-pad] = blk.c
        r = np.arange(p + 1)
        i1 = np.clip(f1[:, None] + r - blk.o1 + pad, 0, C.shape[0] - 1)
        i2 = np.clip(f2[:, None] + r - blk.o2 + pad, 0, C.shape[1] - 1)
        return C[i1[:, :, None], i2[:, None, :]]

    def windows(self, keys, patch: int, a: int, b: int) -> np.ndarray:
        """Stacked ``(p+1) x (p+1)`` coefficient windows at index ``(a, b)`` of a patch."""
        m = self.p + 1
        out = np.zeros((len(keys), m, m))
        for n, key in enumerate(keys):
            blk = self.coeffs(key).get(patch)
            if blk is not None:
                out[n] = _window(blk, a, b, m)
        return out

    def eval_many(self, keys, patch: int, ev1, ev2) -> np.ndarray:
        """Batched :meth:`eval_grid` for several keys, shape ``(nkeys, 6, q1, q2)``."""
        f1, v1 = ev1
        f2, v2 = ev2
        if f1[0] == f1[-1] and f2[0] == f2[-1]:
            W = self.windows(keys, patch, int(f1[0]), int(f2[0]))
            q1, q2, m = len(f1), len(f2), self.p + 1
            # all derivative pairs at once: (i d1) x a @ W @ b x (j d2)
            T = v1.reshape(q1 * 3, m) @ W @ v2.reshape(q2 * 3, m).T
            T = T.reshape(len(keys), q1, 3, q2, 3)
            return np.stack([T[:, :, d1, :, d2] for d1, d2 in _DERIVS], axis=1)
        out = np.zeros((len(keys), 6, len(f1), len(f2)))
        for s1 in np.unique(f1):
            i1 = np.nonzero(f1 == s1)[0]
            for s2 in np.unique(f2):
                i2 = np.nonzero(f2 == s2)[0]
                W = self.windows(keys, patch, int(s1), int(s2))
                for col, (d1, d2) in enumerate(_DERIVS):
                    out[:, col, i1[:, None], i2[None, :]] = np.einsum(
                        "ia,fab,jb->fij", v1[i1, d1], W, v2[i2, d2])
        return out

    def eval_grid(self, key, patch: int, ev1, ev2) -> np.ndarray:
        """Tensor-grid evaluation from precomputed univariate data.

        ``ev1 = (first, vals)`` as returned by ``basis.evaluate(x1, 2)``;
        returns ``(6, len(x1), len(x2))``.
        """
        f1, v1 = ev1
        f2, v2 = ev2
        out = np.zeros((6, len(f1), len(f2)))
        blk = self.coeffs(key).get(patch)
        if blk is None:
            return out
        p = self.p
        if f1[0] == f1[-1] and f2[0] == f2[-1]:
            W = _window(blk, int(f1[0]), int(f2[0]), p + 1)
            for col, (d1, d2) in enumerate(_DERIVS):
                out[col] = v1[:, d1] @ W @ v2[:, d2].T
            return out
        pad = p + 1
        C = np.zeros((blk.c.shape[0] + 2 * pad, blk.c.shape[1] + 2 * pad))
        C[pad:-pad, pad:-pad] = blk.c
        r = np.arange(p + 1)
        i1 = np.clip(f1[:, None] + r - blk.o1 + pad, 0, C.shape[0] - 1)
        i2 = np.clip(f2[:, None] + r - blk.o2 + pad, 0, C.shape[1] - 1)
        G = C[i1[:, None, :, None], i2[None, :, None, :]]
        for col, (d1, d2) in enumerate(_DERIVS):
            out[col] = np.einsum("ia,ijab,jb->ij", v1[:, d1], G, v2[:, d2])
        return out

    def dense_coeffs(self, key, patch: int) -> np.ndarray:
        C = np.zeros((self.n, self.n))
        blk = self.coeffs(key).get(patch)
        if blk is not None:
            C[blk.o1:blk.o1 + blk.c.shape[0], blk.o2:blk.o2 + blk.c.shape[1]] = blk.c
        return C


def physical_derivatives(jac, hess, vals):
    """Convert parametric derivatives ``(npts, 6)`` into physical ones.

    Returns ``(u, grad (npts, 2), hessian (npts, 2, 2))``.
    """
    Jinv = np.linalg.inv(jac)
    g_xi = vals[:, 1:3]
    grad = np.einsum("mai,ma->mi", Jinv, g_xi)
    H_xi = np.stack([np.stack([vals[:, 3], vals[:, 4]], -1),
                     np.stack([vals[:, 4], vals[:, 5]], -1)], -2)
    corr = H_xi - np.einsum("mi,miab->mab", grad, hess)
    H = np.einsum("mai,mab,mbj->mij", Jinv, corr, Jinv)
    return vals[:, 0], grad, H


def build_interior(space: C1Space, patch: int) -> list:
    return [(k, space.coeffs(k)) for k in space.interior_keys(patch)]


def build_edge(space: C1Space, edge: int) -> list:
    return [(k, space.coeffs(k)) for k in space.edge_keys(edge)]


def build_vertex(space: C1Space, vertex: int) -> list:
    return [(k, space.coeffs(k)) for k in space.vertex_keys(vertex)]


def sigma(space: C1Space, vertex: int) -> float:
    return space.sigma(vertex)


def assemble_space(geom: MultiPatchGeometry, p: int = 3, r: int | None = None, k: int = 3,
                   level: int = 0) -> C1Space:
    return C1Space(geom, p, r, k, level)


def coeff_support(space: C1Space, keys) -> set:
    out = set()
    for key in keys:
        for i, blk in space.coeffs(key).items():
            out.update((i, a1, a2) for a1, a2, _ in blk.items())
    return out


def eval_c1(space: C1Space, key, patch: int, xi, max_deriv: int = 0, physical: bool = False):
    vals = space.eval_param(key, patch, xi, max_deriv)
    if not physical:
        return vals
    _, jac, hess = space.geom.patches[patch].evaluate(np.atleast_2d(xi), 2)
    return physical_derivatives(jac, hess, vals)
