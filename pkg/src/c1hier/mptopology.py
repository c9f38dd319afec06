"""
Planar multi-patch geometries in standard form.

Patches are tensor-product spline maps of the unit square.  Topology (inner
and boundary edges, vertex fans) is detected from the control data.  Each edge
and each vertex fan stores the orientation codes that bring the participating
patches into standard form, with every reoriented patch positively oriented:

* edge: ``F0(0, s) = F1(s, 0)`` where ``F0``/``F1`` are the reoriented patches
  on the two sides (only ``F0`` for a boundary edge),
* vertex: the vertex sits at ``(0, 0)`` of every reoriented fan patch, and
  ``F_m(0, .) = F_{m+1}(., 0)`` walking counterclockwise.

Gluing data are linear functions stored by their values at 0 and 1.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .splinecore import KnotBasis, open_knots


class GeometryError(ValueError):
    """Inconsistent or unsupported multi-patch geometry."""


@dataclass(frozen=True)
class OrientationCode:
    """Affine symmetry of the unit square: optional swap, then reversals."""

    swap: bool = False
    rev_u: bool = False
    rev_v: bool = False

    @staticmethod
    def all():
        return [OrientationCode(*c) for c in itertools.product([False, True], repeat=3)]

    @property
    def sign(self) -> int:
        return -1 if (self.swap + self.rev_u + self.rev_v) % 2 else 1

    def to_patch(self, xi):
        """Map local parameters to patch parameters."""
        xi = np.asarray(xi, dtype=float)
        a, b = (xi[..., 1], xi[..., 0]) if self.swap else (xi[..., 0], xi[..., 1])
        a = 1.0 - a if self.rev_u else a
        b = 1.0 - b if self.rev_v else b
        return np.stack([a, b], axis=-1)

    def to_local(self, x):
        x = np.asarray(x, dtype=float)
        a = 1.0 - x[..., 0] if self.rev_u else x[..., 0]
        b = 1.0 - x[..., 1] if self.rev_v else x[..., 1]
        return np.stack([b, a] if self.swap else [a, b], axis=-1)

    def index_to_patch(self, l1, l2, n: int):
        """Map local grid indices (functions or elements, ``n`` per direction)."""
        a, b = (l2, l1) if self.swap else (l1, l2)
        if self.rev_u:
            a = n - 1 - a
        if self.rev_v:
            b = n - 1 - b
        return a, b

    def index_to_local(self, a1, a2, n: int):
        a = n - 1 - a1 if self.rev_u else a1
        b = n - 1 - a2 if self.rev_v else a2
        return (b, a) if self.swap else (a, b)

    def grid_to_patch(self, grid: np.ndarray) -> np.ndarray:
        """Reindex a local ``(n, n, ...)`` array into patch ordering."""
        g = grid
        if self.swap:
            g = np.swapaxes(g, 0, 1)
        if self.rev_u:
            g = g[::-1]
        if self.rev_v:
            g = g[:, ::-1]
        return g

    def grid_to_local(self, grid: np.ndarray) -> np.ndarray:
        g = grid
        if self.rev_u:
            g = g[::-1]
        if self.rev_v:
            g = g[:, ::-1]
        if self.swap:
            g = np.swapaxes(g, 0, 1)
        return g

    def compose(self, other: "OrientationCode") -> "OrientationCode":
        """Code of ``xi -> self.to_patch(other.to_patch(xi))``."""
        probe = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        target = self.to_patch(other.to_patch(probe))
        for c in OrientationCode.all():
            if np.allclose(c.to_patch(probe), target):
                return c
        raise AssertionError("orientation codes do not form a group")


IDENTITY = OrientationCode()


class Patch:
    """Tensor-product spline map ``F: [0,1]^2 -> R^2`` with control net ``(m, m, 2)``."""

    def __init__(self, net, degree: int = 1, k: int = 0):
        self.net = np.asarray(net, dtype=float)
        self.degree = int(degree)
        self.k = int(k)
        self.basis = KnotBasis(self.degree, open_knots(self.degree, 1, self.k))
        m = self.basis.n
        if self.net.shape != (m, m, 2):
            raise GeometryError(f"control net shape {self.net.shape} does not match {(m, m, 2)}")

    def __repr__(self):
        return f"Patch(degree={self.degree}, k={self.k})"

    def evaluate(self, xi, nder: int = 1):
        """Point, Jacobian ``jac[..., i, a] = dF_i/dxi_a`` and Hessian ``hess[..., i, a, b]``."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if np.any((xi < -1e-12) | (xi > 1 + 1e-12)):
            raise GeometryError("parameter outside the unit square")
        q = self.degree
        nd = max(nder, 0)
        f1, v1 = self.basis.evaluate(xi[:, 0], nd)
        f2, v2 = self.basis.evaluate(xi[:, 1], nd)
        idx = np.arange(q + 1)
        sub = self.net[(f1[:, None, None] + idx[None, :, None]),
                       (f2[:, None, None] + idx[None, None, :])]  # (m, q+1, q+1, 2)

        def comb(d1, d2):
            return np.einsum("ma,mb,mabi->mi", v1[:, d1, :], v2[:, d2, :], sub)

        pts = comb(0, 0)
        jac = hess = None
        if nder >= 1:
            jac = np.stack([comb(1, 0), comb(0, 1)], axis=-1)
        if nder >= 2:
            h11, h12, h22 = comb(2, 0), comb(1, 1), comb(0, 2)
            hess = np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)
        return pts, jac, hess

    def reorient(self, code: OrientationCode) -> "Patch":
        return Patch(code.grid_to_local(self.net).copy(), self.degree, self.k)

    def det_samples(self, per_dir: int = 4) -> np.ndarray:
        g, _ = np.polynomial.legendre.leggauss(per_dir)
        g = 0.5 * (g + 1.0)
        br = self.basis.breaks
        pts = np.concatenate([br[e] + (br[e + 1] - br[e]) * g for e in range(len(br) - 1)])
        X, Y = np.meshgrid(pts, pts, indexing="ij")
        _, jac, _ = self.evaluate(np.stack([X.ravel(), Y.ravel()], -1))
        return np.linalg.det(jac)

    def orientation(self) -> int:
        d = self.det_samples()
        if np.all(d > 1e-10):
            return 1
        if np.all(d < -1e-10):
            return -1
        raise GeometryError("geometry map is not regular (Jacobian changes sign or vanishes)")


def reorient(patch: Patch, code: OrientationCode) -> Patch:
    return patch.reorient(code)


def eval_geometry(patch: Patch, xi, max_deriv: int = 1):
    xi = np.asarray(xi, dtype=float)
    pts, jac, hess = patch.evaluate(xi.reshape(-1, 2), max_deriv)
    if xi.ndim == 1:
        return pts[0], None if jac is None else jac[0], None if hess is None else hess[0]
    return pts, jac, hess


@dataclass
class GluingData:
    """Linear gluing functions stored as values at 0 and 1 (``None`` if absent)."""

    alpha0: np.ndarray | None = None
    alpha1: np.ndarray | None = None
    beta0: np.ndarray | None = None
    beta1: np.ndarray | None = None

    @staticmethod
    def lin(c, x, nder=0):
        x = np.asarray(x, dtype=float)
        if nder == 0:
            return c[0] * (1 - x) + c[1] * x
        if nder == 1:
            return np.full_like(x, c[1] - c[0])
        return np.zeros_like(x)

    def a0(self, x, nder=0):
        return self.lin(self.alpha0, x, nder)

    def a1(self, x, nder=0):
        return self.lin(self.alpha1, x, nder)

    def b0(self, x, nder=0):
        return self.lin(self.beta0, x, nder)

    def b1(self, x, nder=0):
        return self.lin(self.beta1, x, nder)

    def beta(self, x):
        return self.a0(x) * self.b1(x) + self.a1(x) * self.b0(x)

    def reversed_swapped(self) -> "GluingData":
        """Gluing data seen from the other end of the edge."""
        def rev(c, s=1.0):
            return None if c is None else s * np.array([c[1], c[0]])
        return GluingData(rev(self.alpha1), rev(self.alpha0), rev(self.beta1, -1.0), rev(self.beta0, -1.0))


@dataclass
class EdgeTopo:
    id: int
    kind: str  # "inner" | "boundary"
    sides: list  # [(patch, code)] with sides[0] = (i0, code0)
    start: int = -1  # vertex id at s = 0
    end: int = -1
    gluing: GluingData | None = None

    @property
    def i0(self):
        return self.sides[0][0]

    @property
    def i1(self):
        return self.sides[1][0] if self.kind == "inner" else None


@dataclass
class VertexTopo:
    id: int
    kind: str
    point: np.ndarray
    fan: list  # [(patch, code)] counterclockwise
    edges: list  # Sigma^(i_m), length valence (+1 for boundary)
    at_start: list = field(default_factory=list)  # vertex is at s=0 of edges[m]

    @property
    def valence(self) -> int:
        return len(self.fan)


# side numbering: 0: u=0, 1: u=1, 2: v=0, 3: v=1
def _side_param(side: int, s):
    s = np.asarray(s, dtype=float)
    c = np.full_like(s, float(side % 2))
    return np.stack([c, s], -1) if side < 2 else np.stack([s, c], -1)


def _local_edge_side(code: OrientationCode, transversal_first: bool):
    """Patch side and direction of the local line ``xi1=0`` (or ``xi2=0``)."""
    s = np.array([0.25, 0.75])
    loc = np.stack([np.zeros(2), s], -1) if transversal_first else np.stack([s, np.zeros(2)], -1)
    x = code.to_patch(loc)
    for side in range(4):
        axis = 0 if side < 2 else 1
        if np.allclose(x[:, axis], side % 2):
            along = x[:, 1 - axis]
            return side, bool(along[1] > along[0])
    raise AssertionError


def _code_for(side: int, increasing: bool, transversal_first: bool) -> OrientationCode:
    for c in OrientationCode.all():
        if _local_edge_side(c, transversal_first) == (side, increasing):
            return c
    raise AssertionError


def _corner_code(corner, orientation: int) -> OrientationCode:
    for c in OrientationCode.all():
        if np.allclose(c.to_patch(np.zeros(2)), corner) and c.sign * orientation > 0:
            return c
    raise AssertionError


class MultiPatchGeometry:
    """Patches plus automatically detected edge and vertex topology."""

    def __init__(self, patches, tol: float = 1e-9, name: str = ""):
        self.patches = list(patches)
        self.name = name
        self.tol = tol
        self.orient = [P.orientation() for P in self.patches]
        self.edges: list[EdgeTopo] = []
        self.vertices: list[VertexTopo] = []
        self.side_edge: dict = {}
        self._build_edges()
        self._build_vertices()
        for e in self.edges:
            e.gluing = compute_gluing(self, e)

    @property
    def npatch(self):
        return len(self.patches)

    def local_patch(self, i: int, code: OrientationCode) -> Patch:
        key = (i, code)
        cache = self.__dict__.setdefault("_local", {})
        if key not in cache:
            cache[key] = self.patches[i].reorient(code)
        return cache[key]

    def _side_points(self, i, side, s):
        return self.patches[i].evaluate(_side_param(side, s), 0)[0]

    def _build_edges(self):
        s = np.linspace(0.0, 1.0, 7)
        sides = [(i, sd) for i in range(self.npatch) for sd in range(4)]
        pts = {key: self._side_points(*key, s) for key in sides}
        scale = max(np.ptp(P.net.reshape(-1, 2), axis=0).max() for P in self.patches)
        tol = self.tol * max(scale, 1.0)
        used = set()
        pairs = []
        for a, b in itertools.combinations(sides, 2):
            if a in used or b in used:
                continue
            if np.abs(pts[a] - pts[b]).max() < tol or np.abs(pts[a] - pts[b][::-1]).max() < tol:
                pairs.append((a, b))
                used.update([a, b])
        for a, b in pairs:
            self._add_inner(a, b)
        for key in sides:
            if key not in used:
                self._add_boundary(key)

    def _add_inner(self, a, b):
        (pa, sa), (pb, sb) = a, b
        code0 = _code_for(sa, True, True)
        if code0.sign * self.orient[pa] < 0:
            code0 = _code_for(sa, False, True)
        G0 = self.local_patch(pa, code0)
        s = np.array([0.2, 0.7])
        target = G0.evaluate(np.stack([np.zeros(2), s], -1), 0)[0]
        code1 = None
        for inc in (True, False):
            c = _code_for(sb, inc, False)
            G1 = self.local_patch(pb, c)
            if np.allclose(G1.evaluate(np.stack([s, np.zeros(2)], -1), 0)[0], target, atol=1e-8):
                code1 = c
        if code1 is None or code1.sign * self.orient[pb] < 0:
            raise GeometryError(f"patches {pa} and {pb} are not consistently oriented")
        eid = len(self.edges)
        self.edges.append(EdgeTopo(eid, "inner", [(pa, code0), (pb, code1)]))
        self.side_edge[(pa, sa)] = eid
        self.side_edge[(pb, sb)] = eid

    def _add_boundary(self, key):
        i, side = key
        code0 = _code_for(side, True, True)
        if code0.sign * self.orient[i] < 0:
            code0 = _code_for(side, False, True)
        eid = len(self.edges)
        self.edges.append(EdgeTopo(eid, "boundary", [(i, code0)]))
        self.side_edge[key] = eid

    def edge_point(self, e: EdgeTopo, s):
        i, c = e.sides[0]
        return self.local_patch(i, c).evaluate(np.array([[0.0, s]]), 0)[0][0]

    def _build_vertices(self):
        corners = []
        for i, P in enumerate(self.patches):
            for c1, c2 in itertools.product([0, 1], repeat=2):
                x = P.evaluate(np.array([[c1, c2]], dtype=float), 0)[0][0]
                corners.append((i, (c1, c2), x))
        groups: list[list] = []
        for item in corners:
            for g in groups:
                if np.linalg.norm(g[0][2] - item[2]) < 1e-8:
                    g.append(item)
                    break
            else:
                groups.append([item])
        for g in groups:
            self._add_vertex(g)
        for e in self.edges:
            for v in self.vertices:
                if np.linalg.norm(self.edge_point(e, 0.0) - v.point) < 1e-8:
                    e.start = v.id
                if np.linalg.norm(self.edge_point(e, 1.0) - v.point) < 1e-8:
                    e.end = v.id
        for v in self.vertices:
            v.at_start = [self.edges[e].start == v.id for e in v.edges]

    def _side_of_local_line(self, i, code, transversal_first):
        side, _ = _local_edge_side(code, transversal_first)
        return self.side_edge[(i, side)]

    def _add_vertex(self, group):
        info = {}
        for i, corner, x in group:
            code = _corner_code(np.array(corner, dtype=float), self.orient[i])
            # previous edge: local line xi2 = 0, next edge: local line xi1 = 0
            prv = self._side_of_local_line(i, code, False)
            nxt = self._side_of_local_line(i, code, True)
            info[(i, corner)] = (code, prv, nxt)
        starts = [m for m, (_, prv, _) in info.items() if self.edges[prv].kind == "boundary"]
        if len(starts) > 1:
            raise GeometryError("non-manifold vertex")
        kind = "boundary" if starts else "inner"
        first = starts[0] if starts else sorted(info)[0]
        order, cur = [], first
        while True:
            order.append(cur)
            nxt = info[cur][2]
            if self.edges[nxt].kind == "boundary":
                break
            follow = [m for m, (_, prv, _) in info.items() if prv == nxt and m != cur]
            if not follow:
                raise GeometryError("vertex fan is broken")
            cur = follow[0]
            if cur == first:
                break
            if cur in order:
                raise GeometryError("vertex fan does not close")
        if len(order) != len(info):
            raise GeometryError("vertex fan does not cover all incident patches")
        fan = [(m[0], info[m][0]) for m in order]
        edges = [info[m][1] for m in order]
        if kind == "boundary":
            edges.append(info[order[-1]][2])
        vid = len(self.vertices)
        self.vertices.append(VertexTopo(vid, kind, np.array(group[0][2]), fan, edges))


def _hat_gram():
    return np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])


def _edge_samples(n=25):
    return 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, n))


def edge_frames(G0: Patch, G1: Patch | None, s):
    """Derivatives along an edge in standard form."""
    s = np.asarray(s, dtype=float)
    _, J0, H0 = G0.evaluate(np.stack([np.zeros_like(s), s], -1), 2)
    out = {"a": J0[:, :, 0], "t": J0[:, :, 1], "a_s": H0[:, :, 0, 1], "t_s": H0[:, :, 1, 1]}
    if G1 is not None:
        _, J1, H1 = G1.evaluate(np.stack([s, np.zeros_like(s)], -1), 2)
        out.update(t1=J1[:, :, 0], b=J1[:, :, 1], b_s=H1[:, :, 1, 0])
    return out


def _det(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def gluing_from_patches(G0: Patch, G1: Patch, tol: float = 1e-9) -> GluingData:
    s = _edge_samples()
    fr = edge_frames(G0, G1, s)
    if np.abs(fr["t"] - fr["t1"]).max() > 1e-8 * (1 + np.abs(fr["t"]).max()):
        raise GeometryError("edge traces are not in standard form")
    D0 = _det(fr["a"], fr["t"])
    D1 = _det(fr["t1"], fr["b"])
    Db = _det(fr["b"], fr["a"])
    h0, h1 = 1 - s, s
    A = np.stack([h0 * D1, h1 * D1, -h0 * D0, -h1 * D0], -1)
    _, sv, vt = np.linalg.svd(A)
    null = vt[sv < tol * max(sv[0], 1.0)].T
    if null.shape[1] == 0:
        raise GeometryError("no linear gluing functions exist (geometry is not AS-G1)")
    G = np.kron(np.eye(2), _hat_gram())
    one = np.ones(4)
    y = np.linalg.solve(null.T @ G @ null, null.T @ G @ one)
    x = null @ y
    a0, a1 = x[:2], x[2:]
    if min(a0[0] * a1[0], a0[1] * a1[1]) <= 0:
        raise GeometryError("gluing functions alpha0*alpha1 are not positive")
    alpha0 = a0[0] * h0 + a0[1] * h1
    beta_s = alpha0 * Db / D0
    V = np.stack([np.ones_like(s), s, s * s], -1)
    bq, *_ = np.linalg.lstsq(V, beta_s, rcond=None)
    if np.abs(V @ bq - beta_s).max() > 1e-8 * (1 + np.abs(beta_s).max()):
        raise GeometryError("beta is not quadratic (geometry is not AS-G1)")
    # beta0, beta1 linear with alpha1*beta0 + alpha0*beta1 = beta, minimal L2 norm
    sc = np.array([0.0, 0.5, 1.0])
    g0 = a0[0] * (1 - sc) + a0[1] * sc
    g1 = a1[0] * (1 - sc) + a1[1] * sc
    C = np.stack([g1 * (1 - sc), g1 * sc, g0 * (1 - sc), g0 * sc], -1)
    rhs = np.array([bq[0] + bq[1] * t + bq[2] * t * t for t in sc])
    L = np.linalg.cholesky(G)
    w = np.linalg.lstsq(C @ np.linalg.inv(L.T), rhs, rcond=None)[0]
    z = np.linalg.solve(L.T, w)
    if np.abs(C @ z - rhs).max() > 1e-9 * (1 + np.abs(rhs).max()):
        raise GeometryError("beta cannot be split into linear beta0, beta1")
    return GluingData(a0.copy(), a1.copy(), z[:2].copy(), z[2:].copy())


def boundary_gluing() -> GluingData:
    return GluingData(alpha0=np.ones(2), beta0=np.zeros(2))


def compute_gluing(geom: MultiPatchGeometry, edge: EdgeTopo) -> GluingData:
    if edge.kind == "boundary":
        return boundary_gluing()
    (i0, c0), (i1, c1) = edge.sides
    return gluing_from_patches(geom.local_patch(i0, c0), geom.local_patch(i1, c1))


def g1_residual(G0: Patch, G1: Patch, gd: GluingData, s) -> np.ndarray:
    fr = edge_frames(G0, G1, s)
    res = (gd.a0(s)[:, None] * fr["b"] + gd.a1(s)[:, None] * fr["a"]
           + gd.beta(s)[:, None] * fr["t"])
    return np.linalg.norm(res, axis=-1)


def asg1_check(geom: MultiPatchGeometry, tol: float = 1e-10, nsamples: int = 50) -> list[dict]:
    s = np.linspace(0, 1, nsamples)
    report = []
    for e in geom.edges:
        if e.kind != "inner":
            continue
        (i0, c0), (i1, c1) = e.sides
        gd = e.gluing
        res = g1_residual(geom.local_patch(i0, c0), geom.local_patch(i1, c1), gd, s)
        amin = float(np.min(gd.a0(s) * gd.a1(s)))
        report.append({"edge": e.id, "min_alpha_product": amin, "residual": float(res.max()),
                       "ok": bool(amin > 0 and res.max() <= tol)})
    return report


def edge_vectors(geom: MultiPatchGeometry, edge: EdgeTopo, s, side: int = 0):
    """``(t, d)`` along an edge; ``side=1`` evaluates ``d`` with the second-patch formula."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    gd = edge.gluing
    i0, c0 = edge.sides[0]
    G1 = geom.local_patch(*edge.sides[1]) if edge.kind == "inner" else None
    fr = edge_frames(geom.local_patch(i0, c0), G1, s)
    t = fr["t"]
    if side == 0:
        a0 = gd.a0(s)
        if np.any(np.abs(a0) < 1e-14):
            raise GeometryError("alpha0 vanishes")
        d = (fr["a"] + gd.b0(s)[:, None] * t) / a0[:, None]
    else:
        a1 = gd.a1(s)
        if np.any(np.abs(a1) < 1e-14):
            raise GeometryError("alpha1 vanishes")
        d = -(fr["b"] + gd.b1(s)[:, None] * t) / a1[:, None]
    return t, d
