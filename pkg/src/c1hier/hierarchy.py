"""
Hierarchical and truncated hierarchical C1 splines on nested dyadic meshes.

Elements are tuples ``(level, patch, e1, e2)``. The subdomain of level ``l`` is
stored as the set of level-``l`` cells ``(patch, e1, e2)`` it is made of.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from .c1basis import C1Space
from .mptopology import MultiPatchGeometry
from .splinecore import ParameterError, refine_row

_KIND = {"I": 0, "E": 1, "V": 2}


def key_order(key):
    """Sort key reproducing the one-level ordering of the basis."""
    if key[0] == "E":
        return (1, key[1], key[3], key[2])
    return (_KIND[key[0]],) + tuple(key[1:])


class StructureError(ValueError):
    pass


class HierarchicalMesh:
    """Nested subdomains ``Omega^0 > Omega^1 > ...`` built from whole cells."""

    def __init__(self, geom: MultiPatchGeometry, k0: int = 3):
        if k0 < 3:
            raise ParameterError("the coarsest mesh must have at least 4x4 elements per patch")
        self.geom = geom
        self.k0 = k0
        n = k0 + 1
        self.domains = [{(i, a, b) for i in range(geom.npatch) for a in range(n) for b in range(n)}]

    def copy(self) -> "HierarchicalMesh":
        other = HierarchicalMesh.__new__(HierarchicalMesh)
        other.geom, other.k0 = self.geom, self.k0
        other.domains = [set(d) for d in self.domains]
        return other

    @property
    def depth(self) -> int:
        return len(self.domains)

    def nel(self, level: int) -> int:
        return (self.k0 + 1) << level

    def in_domain(self, el) -> bool:
        lv = el[0]
        return lv < self.depth and el[1:] in self.domains[lv]

    def is_refined(self, el) -> bool:
        lv, i, a, b = el
        return lv + 1 < self.depth and (i, 2 * a, 2 * b) in self.domains[lv + 1]

    def is_active(self, el) -> bool:
        return self.in_domain(el) and not self.is_refined(el)

    def active_level(self, level: int) -> list:
        dom = self.domains[level]
        nxt = self.domains[level + 1] if level + 1 < self.depth else set()
        return sorted((level, i, a, b) for i, a, b in dom if (i, 2 * a, 2 * b) not in nxt)

    def active_elements(self) -> list:
        out = []
        for lv in range(self.depth):
            out += self.active_level(lv)
        return out

    @staticmethod
    def children(el):
        lv, i, a, b = el
        return [(lv + 1, i, 2 * a + x, 2 * b + y) for x in (0, 1) for y in (0, 1)]

    @staticmethod
    def ancestor(el, level: int):
        lv, i, a, b = el
        s = lv - level
        return (level, i, a >> s, b >> s)

    def descendants(self, el, level: int):
        lv, i, a, b = el
        s = level - lv
        m = 1 << s
        return [(level, i, (a << s) + x, (b << s) + y) for x in range(m) for y in range(m)]

    def refine(self, marked) -> None:
        """Replace every marked active element by its four children."""
        for el in marked:
            if not self.is_active(el):
                raise StructureError(f"element {el} is not active")
        for el in marked:
            if el[0] + 1 == self.depth:
                self.domains.append(set())
            for ch in self.children(el):
                self.domains[ch[0]].add(ch[1:])

    def cover(self, el) -> list:
        """Active elements overlapping the cell ``el`` of any level."""
        lv = el[0]
        for up in range(min(lv, self.depth - 1), -1, -1):
            anc = self.ancestor(el, up)
            if anc[1:] in self.domains[up]:
                if up < lv:
                    return [anc]
                break
        else:
            return []
        if lv >= self.depth or el[1:] not in self.domains[lv]:
            return []
        out, stack = [], [el]
        while stack:
            e = stack.pop()
            if self.is_refined(e):
                stack.extend(self.children(e))
            else:
                out.append(e)
        return out

    def param_rect(self, el):
        lv, i, a, b = el
        h = 1.0 / self.nel(lv)
        return (a * h, (a + 1) * h), (b * h, (b + 1) * h)

    def sort_key(self, el):
        return el


class LevelStack:
    """The one-level spaces of all levels and the two-level masks between them."""

    def __init__(self, geom: MultiPatchGeometry, p: int = 3, r: int | None = None, k0: int = 3):
        self.geom = geom
        self.p = p
        self.r = p - 2 if r is None else r
        self.k0 = k0
        self._spaces: list = []
        self._masks: dict = {}
        self._rows: dict = {}
        self._univariate: dict = {}
        # per-element geometry at quadrature points, reused across refinements
        self.geometry_cache: dict = {}

    def univariate(self, level: int, x) -> tuple:
        """Cached ``basis.evaluate(x, 2)`` of the level-``level`` spline space."""
        x = np.asarray(x, dtype=float)
        key = (level, x.tobytes())
        ev = self._univariate.get(key)
        if ev is None:
            ev = self._univariate[key] = self.space(level).space.basis.evaluate(x, 2)
        return ev

    def space(self, level: int) -> C1Space:
        while len(self._spaces) <= level:
            lv = len(self._spaces)
            self._spaces.append(C1Space(self.geom, self.p, self.r, ((self.k0 + 1) << lv) - 1, lv))
        return self._spaces[level]

    def support(self, level: int, key) -> frozenset:
        return self.space(level).support(key)

    def mask(self, level: int, key) -> dict:
        """Expansion ``{fine key: coefficient}`` of a level-``level`` function."""
        hit = self._masks.get((level, key))
        if hit is None:
            hit = self._compute_mask(level, key)
            self._masks[(level, key)] = hit
        return hit

    def _compute_mask(self, level: int, key) -> dict:
        coarse, fine = self.space(level), self.space(level + 1)
        nf = fine.n
        Ifine = range(2, nf - 2)
        out: dict = {}
        strip: dict = {}
        for i, blk in coarse.coeffs(key).items():
            rows = [self._row(level, a) for a in range(blk.o1, blk.o1 + blk.c.shape[0])]
            cols = [self._row(level, a) for a in range(blk.o2, blk.o2 + blk.c.shape[1])]
            R1, f1 = _stack_rows(rows)
            R2, f2 = _stack_rows(cols)
            F = R1.T @ blk.c @ R2
            scale = np.abs(F).max()
            for x, y in zip(*np.nonzero(np.abs(F) > 1e-14 * scale)):
                a1, a2 = f1 + int(x), f2 + int(y)
                if a1 in Ifine and a2 in Ifine:
                    out[("I", i, a1, a2)] = float(F[x, y])
                else:
                    strip[(i, a1, a2)] = float(F[x, y])
        if strip:
            out.update(self._solve_strip(level, key, strip))
        return out

    def _row(self, level, a):
        hit = self._rows.get((level, a))
        if hit is None:
            hit = refine_row(self.space(level).space.basis, self.space(level + 1).space.basis, a)
            self._rows[(level, a)] = hit
        return hit

    def _solve_strip(self, level, key, strip) -> dict:
        fine = self.space(level + 1)
        nel = fine.nel
        last = nel - 1
        cands = []
        for (_, i, a, b) in self._fine_cells(level, key):
            if a in (0, last) or b in (0, last):
                cands.extend(k for k in fine.functions_on(i, a, b) if k[0] != "I")
        cands = list(dict.fromkeys(cands))
        pos: dict = {}
        entries = []
        for c, k in enumerate(cands):
            for i, blk in fine.coeffs(k).items():
                for a1, a2, v in blk.items():
                    row = pos.setdefault((i, a1, a2), len(pos))
                    entries.append((row, c, v))
        for q in strip:
            pos.setdefault(q, len(pos))
        A = np.zeros((len(pos), len(cands)))
        for row, c, v in entries:
            A[row, c] += v
        rhs = np.zeros(len(pos))
        for q, v in strip.items():
            rhs[pos[q]] = v
        sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
        res = np.abs(A @ sol - rhs).max() if len(pos) else 0.0
        if res > 1e-9 * max(1.0, np.abs(rhs).max()):
            raise StructureError(f"function {key} of level {level} is not reproduced at level {level + 1}")
        tol = 1e-13 * max(1.0, np.abs(sol).max())
        return {k: float(v) for k, v in zip(cands, sol) if abs(v) > tol}

    def _fine_cells(self, level, key):
        for (i, a, b) in self.support(level, key):
            for x in (0, 1):
                for y in (0, 1):
                    yield (level + 1, i, 2 * a + x, 2 * b + y)

    def expand(self, level: int, key, target: int) -> dict:
        """Coefficients of a function of ``level`` in the basis of level ``target``."""
        cur = {key: 1.0}
        for lv in range(level, target):
            nxt: dict = defaultdict(float)
            for k, c in cur.items():
                for fk, fc in self.mask(lv, k).items():
                    nxt[fk] += c * fc
            cur = dict(nxt)
        return cur


def _stack_rows(rows):
    lo = min(o for o, _ in rows)
    hi = max(o + len(c) for o, c in rows)
    R = np.zeros((len(rows), hi - lo))
    for n, (o, c) in enumerate(rows):
        R[n, o - lo:o - lo + len(c)] = c
    return R, lo


def two_level_mask(stack: LevelStack, level: int, keys=None) -> dict:
    """Masks of the given (default: all) functions of ``level``."""
    if keys is None:
        keys = stack.space(level).keys()
    return {k: stack.mask(level, k) for k in keys}


class HierarchicalSpace:
    """Active hierarchical functions on a mesh, in plain or truncated form.

    Each degree of freedom is described by a list of terms ``(level, key, coef)``;
    plain functions have a single term.
    """

    def __init__(self, mesh: HierarchicalMesh, stack: LevelStack, mode: str = "plain"):
        if mode not in ("plain", "truncated"):
            raise ValueError("mode must be 'plain' or 'truncated'")
        if stack.geom is not mesh.geom or stack.k0 != mesh.k0:
            raise StructureError("mesh and level stack describe different hierarchies")
        self.mesh = mesh
        self.stack = stack
        self.mode = mode
        self.active = select_active(mesh, stack)
        self.index = {f: n for n, f in enumerate(self.active)}
        if mode == "truncated":
            anc: dict = {}
            self.terms = [truncate(mesh, stack, lv, k, anc) for lv, k in self.active]
        else:
            self.terms = [[(lv, k, 1.0)] for lv, k in self.active]
        self._element_map = None

    @property
    def ndof(self) -> int:
        return len(self.active)

    @property
    def p(self):
        return self.stack.p

    def element_map(self) -> dict:
        """``{active element: [(dof, level, key, coef), ...]}`` for all nonzero terms."""
        if self._element_map is None:
            emap = defaultdict(list)
            cover_cache: dict = {}
            for d, terms in enumerate(self.terms):
                for lv, key, c in terms:
                    hit = set()
                    for cell in self.stack.support(lv, key):
                        el = (lv,) + cell
                        cov = cover_cache.get(el)
                        if cov is None:
                            cov = self.mesh.cover(el)
                            cover_cache[el] = cov
                        hit.update(cov)
                    for q in hit:
                        emap[q].append((d, lv, key, c))
            self._element_map = dict(emap)
        return self._element_map

    def support(self, dof: int) -> set:
        """Support of a degree of freedom as a set of active elements."""
        out = set()
        for lv, key, _ in self.terms[dof]:
            for cell in self.stack.support(lv, key):
                out.update(self.mesh.cover((lv,) + cell))
        return out

    def evaluate(self, dof: int, patch: int, xi, nder: int = 0) -> np.ndarray:
        return eval_hier(self, dof, patch, xi, nder)

    def element_values(self, el, x1, x2):
        """Parametric derivatives of all dofs nonzero on ``el`` at the tensor grid ``x1 x x2``.

        Returns ``(dofs, vals)`` with ``vals`` of shape ``(ndofs, 6, len(x1), len(x2))``.
        """
        entries = self.element_map().get(el, [])
        dofs = sorted({d for d, *_ in entries})
        pos = {d: n for n, d in enumerate(dofs)}
        vals = np.zeros((len(dofs), 6, len(x1), len(x2)))
        by_level = defaultdict(list)
        for d, lv, key, c in entries:
            by_level[lv].append((pos[d], key, c))
        for lv, items in by_level.items():
            sp_ = self.stack.space(lv)
            e1, e2 = self.stack.univariate(lv, x1), self.stack.univariate(lv, x2)
            rows = np.array([n for n, _, _ in items])
            V = sp_.eval_many([k for _, k, _ in items], el[1], e1, e2)
            V *= np.array([c for _, _, c in items])[:, None, None, None]
            np.add.at(vals, rows, V)
        return dofs, vals


def _subset_of_domain(cells, domain) -> bool:
    return all(c in domain for c in cells)


def select_active(mesh: HierarchicalMesh, stack: LevelStack) -> list:
    """Active functions ``(level, key)`` in deterministic order."""
    out = []
    for lv in range(mesh.depth):
        elems = mesh.active_level(lv)
        if not elems:
            continue
        sp_ = stack.space(lv)
        dom = mesh.domains[lv]
        cand = set()
        for _, i, a, b in elems:
            cand.update(sp_.functions_on(i, a, b))
        keep = [k for k in cand if _subset_of_domain(sp_.support(k), dom)]
        out += [(lv, k) for k in sorted(keep, key=key_order)]
    return out


def truncate(mesh: HierarchicalMesh, stack: LevelStack, level: int, key, anc=None) -> list:
    """Successive truncation of an active function as a term list ``(level, key, coef)``.

    ``anc`` may be a dict shared between calls on one mesh; it caches the
    coarse-level shadows of the domains.
    """
    anc = {} if anc is None else anc
    terms = {(level, key): 1.0}
    for m in range(level + 1, mesh.depth):
        dom = mesh.domains[m]
        if not dom:
            break
        new: dict = defaultdict(float)
        for (lv, k), c in terms.items():
            if not _touches(mesh, stack, lv, k, m, anc):
                new[(lv, k)] += c
                continue
            kids = stack.expand(lv, k, m)
            inside = {fk for fk in kids if _subset_of_domain(stack.support(m, fk), dom)}
            if not inside:
                new[(lv, k)] += c
                continue
            for fk, fc in kids.items():
                if fk not in inside:
                    new[(m, fk)] += c * fc
        terms = {t: c for t, c in new.items() if c != 0.0}
    return [(lv, k, c) for (lv, k), c in sorted(terms.items(), key=lambda t: (t[0][0], key_order(t[0][1])))]


def _touches(mesh, stack, lv, key, m, anc) -> bool:
    """Whether the support of a level-``lv`` function meets ``Omega^m``."""
    shadow = anc.get((m, lv))
    if shadow is None:
        s = m - lv
        shadow = anc[(m, lv)] = {(i, a >> s, b >> s) for i, a, b in mesh.domains[m]}
    return not shadow.isdisjoint(stack.support(lv, key))


def eval_hier(hspace: HierarchicalSpace, dof: int, patch: int, xi, nder: int = 0) -> np.ndarray:
    """Parametric derivatives ``(npts, 6)`` of one (possibly truncated) function."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    out = np.zeros((len(xi), 6))
    for lv, key, c in hspace.terms[dof]:
        out += c * hspace.stack.space(lv).eval_param(key, patch, xi, nder)
    return out


def vertex_audit(hspace: HierarchicalSpace) -> list:
    """Active vertex functions without an active same-level element at their vertex."""
    bad = []
    for lv, key in hspace.active:
        if key[0] != "V":
            continue
        sp_ = hspace.stack.space(lv)
        if not any(hspace.mesh.is_active((lv,) + c) for c in sp_.vertex_elements(key[1])):
            bad.append((lv, key))
    return bad


def _sample_points(p: int):
    g, _ = np.polynomial.legendre.leggauss(p + 2)
    return 0.5 * (g + 1.0)


def collocation_matrix(hspace: HierarchicalSpace, elements=None, dofs=None):
    """Evaluation matrix with ``(p+2)^2`` points per element."""
    mesh = hspace.mesh
    t = _sample_points(hspace.p)
    elements = mesh.active_elements() if elements is None else elements
    cols = list(range(hspace.ndof)) if dofs is None else list(dofs)
    cpos = {d: n for n, d in enumerate(cols)}
    blocks = []
    for el in elements:
        (a0, a1), (b0, b1) = mesh.param_rect(el)
        ds, vals = hspace.element_values(el, a0 + (a1 - a0) * t, b0 + (b1 - b0) * t)
        M = np.zeros((len(t) ** 2, len(cols)))
        for n, d in enumerate(ds):
            if d in cpos:
                M[:, cpos[d]] = vals[n, 0].ravel()
        blocks.append(M)
    return np.vstack(blocks) if blocks else np.zeros((0, len(cols)))


def numerical_rank(M: np.ndarray, tol: float = 1e-9) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int((s > tol * s[0]).sum()) if s[0] > 0 else 0


def check_P1(hspace: HierarchicalSpace, tol: float = 1e-9):
    """Per-level independence of the active level-``l`` functions on ``Omega^l minus Omega^{l+1}``.

    Returns ``(ok, witnesses)`` where each witness is ``(level, nfunctions, rank,
    vertex functions lacking an active adjacent element)``.
    """
    mesh = hspace.mesh
    audit = vertex_audit(hspace)
    witnesses = []
    t = _sample_points(hspace.p)
    for lv in range(mesh.depth):
        keys = [k for l, k in hspace.active if l == lv]
        if not keys:
            continue
        sp_ = hspace.stack.space(lv)
        B = sp_.space.basis
        col = {k: n for n, k in enumerate(keys)}
        blocks = []
        for el in mesh.active_level(lv):
            (a0, a1), (b0, b1) = mesh.param_rect(el)
            e1 = B.evaluate(a0 + (a1 - a0) * t, 2)
            e2 = B.evaluate(b0 + (b1 - b0) * t, 2)
            M = np.zeros((len(t) ** 2, len(keys)))
            ks = [k for k in sp_.functions_on(*el[1:]) if k in col]
            if ks:
                V = sp_.eval_many(ks, el[1], e1, e2)[:, 0]
                M[:, [col[k] for k in ks]] = V.reshape(len(ks), -1).T
            blocks.append(M)
        rank = numerical_rank(np.vstack(blocks), tol)
        if rank < len(keys):
            witnesses.append((lv, len(keys), rank, [f for f in audit if f[0] == lv]))
    return not witnesses, witnesses


def global_rank(hspace: HierarchicalSpace, tol: float = 1e-9) -> int:
    return numerical_rank(collocation_matrix(hspace), tol)
