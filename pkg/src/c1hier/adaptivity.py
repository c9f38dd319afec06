"""
Element distance, refinement neighborhoods and admissible refinement.

Elements are tuples ``(level, patch, e1, e2)``. Two elements of one level are
neighbours when their closures meet, which on the conforming level mesh means
that they share a mesh node; nodes on interfaces and vertices are numbered
globally so that the rings cross patch boundaries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

from .hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack
from .mptopology import MultiPatchGeometry


class Element(NamedTuple):
    level: int
    patch: int
    e1: int
    e2: int

    def rect(self, k0: int):
        """Parametric rectangle ``((a1, b1), (a2, b2))`` as exact fractions."""
        n = (k0 + 1) << self.level
        return ((Fraction(self.e1, n), Fraction(self.e1 + 1, n)),
                (Fraction(self.e2, n), Fraction(self.e2 + 1, n)))


@dataclass(frozen=True)
class AdmissibilityConfig:
    """Admissibility class ``mu`` (1 disables the closure) and variant ``H`` or ``T``."""

    mu: int = 2
    variant: str = "T"

    def __post_init__(self):
        if self.mu < 1:
            raise ValueError("mu must be at least 1")
        if self.variant not in ("H", "T"):
            raise ValueError("variant must be 'H' or 'T'")


class MeshGraph:
    """Node-sharing adjacency of the uniform meshes of every level."""

    def __init__(self, geom: MultiPatchGeometry, k0: int):
        self.geom = geom
        self.k0 = k0
        self._nb = {}
        self._corner = {}
        for v in geom.vertices:
            for i, code in v.fan:
                self._corner[(i,) + tuple(code.index_to_patch(0, 0, 2))] = v.id
        self._sides = {}
        for e in geom.edges:
            for pos, (i, code) in enumerate(e.sides):
                self._sides[i] = self._sides.get(i, []) + [(e.id, pos, code)]

    def nel(self, level):
        return (self.k0 + 1) << level

    def node_id(self, level, i, x, y):
        n = self.nel(level)
        bx, by = x in (0, n), y in (0, n)
        if bx and by:
            return ("V", self._corner[(i, x // n, y // n)])
        if not (bx or by):
            return ("P", i, x, y)
        for eid, pos, code in self._sides[i]:
            l1, l2 = code.index_to_local(x, y, n + 1)
            if pos == 0 and l1 == 0:
                return ("E", eid, l2)
            if pos == 1 and l2 == 0:
                return ("E", eid, l1)
        raise AssertionError("node on a side without an edge")

    def node_elements(self, level, node):
        n = self.nel(level)
        if node[0] == "P":
            _, i, x, y = node
            return [(level, i, x - dx, y - dy) for dx in (0, 1) for dy in (0, 1)]
        if node[0] == "V":
            v = self.geom.vertices[node[1]]
            return [(level, i) + tuple(code.index_to_patch(0, 0, n)) for i, code in v.fan]
        _, eid, s = node
        out = []
        for pos, (i, code) in enumerate(self.geom.edges[eid].sides):
            for t in (s - 1, s):
                loc = (0, t) if pos == 0 else (t, 0)
                out.append((level, i) + tuple(code.index_to_patch(*loc, n)))
        return out

    def neighbours(self, el):
        el = tuple(el)
        if el not in self._nb:
            lv, i, a, b = el
            out = set()
            for x in (a, a + 1):
                for y in (b, b + 1):
                    out.update(self.node_elements(lv, self.node_id(lv, i, x, y)))
            self._nb[el] = frozenset(out)
        return self._nb[el]

    def ring_distance(self, src, targets) -> dict:
        """Ring index ``s`` of every target (same level as ``src``) by breadth-first search."""
        todo = set(targets)
        found = {}
        seen = {src}
        frontier = [src]
        s = 0
        while True:
            for q in frontier:
                if q in todo:
                    found[q] = s
                    todo.discard(q)
            if not todo:
                return found
            nxt = []
            for q in frontier:
                for r in self.neighbours(q):
                    if r not in seen:
                        seen.add(r)
                        nxt.append(r)
            if not nxt:
                raise ValueError("elements are not connected")
            frontier = nxt
            s += 1

    def ring(self, el, s: int) -> set:
        """Elements of ``Pi^s(el)``."""
        seen = {el}
        frontier = [el]
        for _ in range(s):
            nxt = []
            for q in frontier:
                for r in self.neighbours(q):
                    if r not in seen:
                        seen.add(r)
                        nxt.append(r)
            frontier = nxt
        return seen


def _descendants(el, level):
    lv, i, a, b = el
    s = level - lv
    m = 1 << s
    return [(level, i, (a << s) + x, (b << s) + y) for x in range(m) for y in range(m)]


def dist(graph: MeshGraph, q, q2) -> Fraction:
    """Distance between elements of any levels as an exact dyadic rational."""
    if q[0] < q2[0]:
        q, q2 = q2, q
    lv = q[0]
    targets = _descendants(q2, lv) if q2[0] < lv else [q2]
    rings = graph.ring_distance(tuple(q), [tuple(t) for t in targets])
    return Fraction(max(rings.values()), 1 << lv)


def support_extension(stack: LevelStack, q, k: int) -> set:
    """Level-``k`` cells in the supports of level-``k`` functions not vanishing on ``q``."""
    if k < 0:
        return set()
    lv = q[0]
    if k <= lv:
        cells = [HierarchicalMesh.ancestor(q, k)]
    else:
        cells = _descendants(q, k)
    sp_ = stack.space(k)
    keys = set()
    for c in cells:
        keys.update(sp_.functions_on(*c[1:]))
    out = set()
    for key in keys:
        out.update((k,) + c for c in sp_.support(key))
    return out


def neighborhood(mesh: HierarchicalMesh, stack: LevelStack, q, cfg: AdmissibilityConfig) -> set:
    """Admissibility neighborhood of an active element (empty when ``mu == 1``)."""
    if cfg.mu < 2:
        return set()
    base = q[0] - cfg.mu + 1
    if base < 0:
        return set()
    ext_level = base if cfg.variant == "H" else base + 1
    ext = support_extension(stack, q, ext_level)
    out = set()
    for c in ext:
        anc = HierarchicalMesh.ancestor(c, base)
        if mesh.is_active(anc):
            out.add(anc)
    return out


def vertex_adjacency(mesh: HierarchicalMesh, stack: LevelStack, q) -> list:
    """Vertices ``(vertex id, fan index)`` having ``q`` as an adjacent element."""
    sp_ = stack.space(q[0])
    return [(vid, m) for vid, m in sp_._patch_vertices.get(q[1], [])
            if (q[0],) + tuple(sp_.vertex_elements(vid)[m]) == tuple(q)]


def vertex_patch_neighborhood(mesh: HierarchicalMesh, stack: LevelStack, q) -> set:
    """Active same-level elements of the patch of ``q`` inside its vertex functions' supports."""
    out = set()
    sp_ = stack.space(q[0])
    for vid, _ in vertex_adjacency(mesh, stack, q):
        for c in sp_.vertex_footprint(vid):
            el = (q[0],) + c
            if c[0] == q[1] and el != tuple(q) and mesh.is_active(el):
                out.add(el)
    return out


def mark_vertex_patch(mesh: HierarchicalMesh, stack: LevelStack, marked) -> set:
    marked = set(marked)
    extra = set()
    for q in marked:
        extra |= vertex_patch_neighborhood(mesh, stack, q)
    return marked | (extra - marked)


def refine(mesh: HierarchicalMesh, stack: LevelStack, marked, cfg: AdmissibilityConfig) -> set:
    """Close the marking and refine the mesh in place; returns the refined elements."""
    M = {tuple(q) for q in marked}
    for q in M:
        if not mesh.is_active(q):
            raise ValueError(f"marked element {q} is not active")
    cache: dict = {}
    while True:
        M = mark_vertex_patch(mesh, stack, M)
        U = set()
        for q in M:
            if q not in cache:
                cache[q] = neighborhood(mesh, stack, q, cfg)
            U |= cache[q]
        U -= M
        if not U:
            break
        M |= U
    mesh.refine(sorted(M))
    return M


def admissibility_class(hspace: HierarchicalSpace) -> int:
    """Largest number of levels among the functions acting on one active element."""
    worst = 0
    emap = hspace.element_map()
    for q in hspace.mesh.active_elements():
        levels = {hspace.active[d][0] for d, *_ in emap.get(q, [])}
        worst = max(worst, len(levels))
    return worst


def constants(p: int, mu: int):
    """``C_supp, C_Nchi, C_NH, C_NT, C_dist(H), C_dist(T)`` for maximal regularity."""
    c_supp = max(p, 5)
    c_chi = 2
    c_nh = 2 ** (mu - 1) * (c_supp + 1) - 1
    c_nt = Fraction(2 ** mu * (c_supp + 2), 4) - 1
    denom = 1 - Fraction(2, 2 ** mu)
    return {"C_supp": c_supp, "C_Nchi": c_chi, "C_NH": c_nh, "C_NT": c_nt,
            "C_dist_H": (c_chi + c_nh) / denom if mu > 1 else None,
            "C_dist_T": (c_chi + c_nt) / denom if mu > 1 else None}


@dataclass
class ComplexityLedger:
    initial: int
    marked: list = field(default_factory=list)
    sizes: list = field(default_factory=list)

    def record(self, n_marked: int, n_elements: int):
        self.marked.append(n_marked)
        self.sizes.append(n_elements)

    @property
    def ratios(self) -> list:
        out, tot = [], 0
        for m, n in zip(self.marked, self.sizes):
            tot += m
            out.append((n - self.initial) / tot if tot else 0.0)
        return out


def complexity_report(ledger: ComplexityLedger) -> dict:
    r = ledger.ratios
    return {"steps": len(r), "sum_marked": sum(ledger.marked),
            "generated": (ledger.sizes[-1] - ledger.initial) if ledger.sizes else 0,
            "ratio": r[-1] if r else 0.0, "ratios": r, "marked": list(ledger.marked),
            "added": [b - a for a, b in zip([ledger.initial] + ledger.sizes, ledger.sizes)]}
