"""
Galerkin solvers for the Poisson and biharmonic problems on hierarchical C1
spaces, error estimators, Doerfler marking and the adaptive loop.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .adaptivity import AdmissibilityConfig, admissibility_class, refine
from .config import RunConfig
from .hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack, check_P1
from .mptopology import MultiPatchGeometry


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model problems


@dataclass
class ModelProblem:
    """Exact solution with derivatives and the matching right-hand side.

    Callables take points ``(m, 2)``; ``grad`` returns ``(m, 2)``, ``hess``
    returns ``(m, 2, 2)``.
    """

    kind: str
    u: object
    grad: object
    hess: object
    f: object
    name: str = ""


def poisson_singular(P=(0.0, 0.0), alpha: float = 4.0 / 3.0) -> ModelProblem:
    """``u = |x - P|^alpha`` with ``f = -alpha^2 |x - P|^(alpha - 2)``."""
    P = np.asarray(P, dtype=float)

    def u(x):
        return np.linalg.norm(x - P, axis=-1) ** alpha

    def grad(x):
        d = x - P
        r = np.maximum(np.linalg.norm(d, axis=-1), 1e-300)
        return alpha * (r ** (alpha - 2))[:, None] * d

    def hess(x):
        d = x - P
        r = np.maximum(np.linalg.norm(d, axis=-1), 1e-300)
        I = np.eye(2)[None]
        outer = d[:, :, None] * d[:, None, :]
        return alpha * (r ** (alpha - 2))[:, None, None] * I + \
            alpha * (alpha - 2) * (r ** (alpha - 4))[:, None, None] * outer

    def f(x):
        r = np.maximum(np.linalg.norm(x - P, axis=-1), 1e-300)
        return -alpha ** 2 * r ** (alpha - 2)

    return ModelProblem("poisson", u, grad, hess, f, "singular")


def poisson_polynomial(a=0.3, b=-1.2, c=0.7, d=2.0) -> ModelProblem:
    """Bilinear ``u = a + b x + c y + d x y``, harmonic so ``f = 0``."""
    def u(x):
        return a + b * x[:, 0] + c * x[:, 1] + d * x[:, 0] * x[:, 1]

    def grad(x):
        return np.stack([b + d * x[:, 1], c + d * x[:, 0]], -1)

    def hess(x):
        H = np.zeros((len(x), 2, 2))
        H[:, 0, 1] = H[:, 1, 0] = d
        return H

    return ModelProblem("poisson", u, grad, hess, lambda x: np.zeros(len(x)), "bilinear")


def poisson_smooth() -> ModelProblem:
    """``u = sin(pi x) sin(pi y) + x``."""
    pi = math.pi

    def u(x):
        return np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1]) + x[:, 0]

    def grad(x):
        s0, s1 = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
        c0, c1 = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
        return np.stack([pi * c0 * s1 + 1.0, pi * s0 * c1], -1)

    def hess(x):
        s0, s1 = np.sin(pi * x[:, 0]), np.sin(pi * x[:, 1])
        c0, c1 = np.cos(pi * x[:, 0]), np.cos(pi * x[:, 1])
        H = np.empty((len(x), 2, 2))
        H[:, 0, 0] = H[:, 1, 1] = -pi ** 2 * s0 * s1
        H[:, 0, 1] = H[:, 1, 0] = pi ** 2 * c0 * c1
        return H

    def f(x):
        return 2 * pi ** 2 * np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1])

    return ModelProblem("poisson", u, grad, hess, f, "smooth")


def poisson_ridge() -> ModelProblem:
    """``u = g(y - x)`` with ``g(t) = t |t|^(4/3) exp(-t^2)``, singular along ``y = x``."""
    def parts(x):
        t = x[:, 1] - x[:, 0]
        a = np.abs(t)
        e = np.exp(-t * t)
        return t, a, e

    def u(x):
        t, a, e = parts(x)
        return t * a ** (4 / 3) * e

    def grad(x):
        t, a, e = parts(x)
        d = a ** (4 / 3) * e * (7 / 3 - 2 * t * t)
        return np.stack([-d, d], -1)

    def g2(x):
        t, a, e = parts(x)
        return e * t * a ** (1 / 3) / np.maximum(a, 1e-300) * (28 / 9 - 34 / 3 * t * t + 4 * t ** 4)

    def hess(x):
        d2 = g2(x)
        return d2[:, None, None] * np.array([[1.0, -1.0], [-1.0, 1.0]])[None]

    return ModelProblem("poisson", u, grad, hess, lambda x: -2 * g2(x), "ridge")


LSHAPE_Z = 0.544483736782464


def biharmonic_lshape(z: float = LSHAPE_Z, homogeneous: bool = False) -> ModelProblem:
    """Corner singularity of the biharmonic operator at the re-entrant corner.

    With ``homogeneous=True`` the second sine term of ``C1`` is scaled by
    ``1/(z+1)``, so that value and normal derivative vanish on both edges at
    the corner; otherwise both terms use ``1/(z-1)`` and the edge
    ``theta = 3 pi / 2`` carries nonzero data. Both are biharmonic.
    """
    w = 1.5 * math.pi
    C1 = (math.sin(w * (z - 1)) - math.sin(w * (z + 1))) / (z - 1)
    if homogeneous:
        C1 = math.sin(w * (z - 1)) / (z - 1) - math.sin(w * (z + 1)) / (z + 1)
    C2 = math.cos(w * (z - 1)) - math.cos(w * (z + 1))
    lam = z + 1

    def phi(t, k):
        """``k``-th derivative of the angular factor."""
        a, b = z - 1, z + 1

        def dcos(m, t):
            return m ** k * np.cos(m * t + k * math.pi / 2)

        def dsin(m, t):
            return m ** k * np.sin(m * t + k * math.pi / 2)
        F1 = dcos(a, t) - dcos(b, t)
        F2 = dsin(a, t) / a - dsin(b, t) / b
        return C1 * F1 - C2 * F2

    def polar(x):
        r = np.maximum(np.hypot(x[:, 0], x[:, 1]), 1e-300)
        t = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * math.pi)
        return r, t

    def u(x):
        r, t = polar(x)
        return r ** lam * phi(t, 0)

    def grad(x):
        r, t = polar(x)
        ur = lam * r ** (lam - 1) * phi(t, 0)
        ut = r ** lam * phi(t, 1)
        c, s = np.cos(t), np.sin(t)
        return np.stack([c * ur - s * ut / r, s * ur + c * ut / r], -1)

    def hess(x):
        r, t = polar(x)
        P0, P1, P2 = phi(t, 0), phi(t, 1), phi(t, 2)
        ur = lam * r ** (lam - 1) * P0
        urr = lam * (lam - 1) * r ** (lam - 2) * P0
        ut = r ** lam * P1
        utt = r ** lam * P2
        urt = lam * r ** (lam - 1) * P1
        c, s = np.cos(t), np.sin(t)
        A = ur / r + utt / r ** 2
        B = urt / r - ut / r ** 2
        H = np.empty((len(x), 2, 2))
        H[:, 0, 0] = c * c * urr + s * s * A - 2 * s * c * B
        H[:, 1, 1] = s * s * urr + c * c * A + 2 * s * c * B
        H[:, 0, 1] = H[:, 1, 0] = s * c * (urr - A) + (c * c - s * s) * B
        return H

    return ModelProblem("biharmonic", u, grad, hess, lambda x: np.zeros(len(x)), "lshape")


def biharmonic_polynomial() -> ModelProblem:
    """Biquadratic ``u = (1 + x + 2y)^2 / 4 + x y``, so ``Delta^2 u = 0``."""
    def u(x):
        return (1 + x[:, 0] + 2 * x[:, 1]) ** 2 / 4 + x[:, 0] * x[:, 1]

    def grad(x):
        s = (1 + x[:, 0] + 2 * x[:, 1]) / 2
        return np.stack([s + x[:, 1], 2 * s + x[:, 0]], -1)

    def hess(x):
        H = np.empty((len(x), 2, 2))
        H[:, 0, 0] = 0.5
        H[:, 1, 1] = 2.0
        H[:, 0, 1] = H[:, 1, 0] = 2.0
        return H

    return ModelProblem("biharmonic", u, grad, hess, lambda x: np.zeros(len(x)), "biquadratic")


def make_problem(kind: str, example: str, geom: MultiPatchGeometry | None = None) -> ModelProblem:
    if kind == "poisson":
        if example == "singular":
            P = (0.0, 0.0)
            if geom is not None and geom.name != "threepatch-ev3":
                inner = [v for v in geom.vertices if v.kind == "inner"]
                P = tuple(inner[0].point) if inner else (0.0, 0.0)
            return poisson_singular(P)
        if example == "bilinear":
            return poisson_polynomial()
        if example == "smooth":
            return poisson_smooth()
        if example == "ridge":
            return poisson_ridge()
    if kind == "biharmonic":
        if example == "lshape":
            return biharmonic_lshape()
        if example == "biquadratic":
            return biharmonic_polynomial()
    raise ValueError(f"unknown example {example!r} for problem {kind!r}")


# ---------------------------------------------------------------------------
# element quadrature


def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _to_physical(vals, jac, hess):
    """Parametric derivatives ``(nf, 6, Q)`` to values, gradients, Hessians."""
    Jinv = np.linalg.inv(jac)
    nf, _, Q = vals.shape
    gxi = np.moveaxis(vals[:, 1:3], 1, 2)[:, :, None, :]
    g = (gxi @ Jinv)[:, :, 0]
    Hxi = np.empty((nf, Q, 2, 2))
    Hxi[:, :, 0, 0] = vals[:, 3]
    Hxi[:, :, 0, 1] = Hxi[:, :, 1, 0] = vals[:, 4]
    Hxi[:, :, 1, 1] = vals[:, 5]
    corr = Hxi - (g[:, :, None, :] @ hess.reshape(Q, 2, 4)).reshape(nf, Q, 2, 2)
    H = np.swapaxes(Jinv, 1, 2) @ corr @ Jinv
    return vals[:, 0], g, H


def element_diameter(geom: MultiPatchGeometry, mesh: HierarchicalMesh, el) -> float:
    (a0, a1), (b0, b1) = mesh.param_rect(el)
    c = np.array([[a0, b0], [a1, b0], [a0, b1], [a1, b1]])
    x = geom.patches[el[1]].evaluate(c, 0)[0]
    return max(np.linalg.norm(x[i] - x[j]) for i in range(4) for j in range(i + 1, 4))


class Quadrature:
    """Per-element physical basis data of a hierarchical space."""

    def __init__(self, hspace: HierarchicalSpace, npts: int | None = None):
        self.hspace = hspace
        self.mesh = hspace.mesh
        self.geom = hspace.mesh.geom
        self.npts = hspace.p + 2 if npts is None else npts
        self.t, self.w = _gauss(self.npts)
        self._elements: dict = {}

    def _geometry(self, el):
        key = (el, self.npts)
        cache = self.hspace.stack.geometry_cache
        g = cache.get(key)
        if g is None:
            (a0, a1), (b0, b1) = self.mesh.param_rect(el)
            x1 = a0 + (a1 - a0) * self.t
            x2 = b0 + (b1 - b0) * self.t
            xi = np.stack(np.meshgrid(x1, x2, indexing="ij"), -1).reshape(-1, 2)
            pts, jac, hess = self.geom.patches[el[1]].evaluate(xi, 2)
            det = np.abs(np.linalg.det(jac))
            wts = np.outer(self.w, self.w).ravel() * (a1 - a0) * (b1 - b0) * det
            g = cache[key] = (x1, x2, pts, jac, hess, wts, element_diameter(self.geom, self.mesh, el))
        return g

    def element(self, el):
        """``(dofs, points, weights, u, grad, hess, h)`` on one element."""
        out = self._elements.get(el)
        if out is None:
            x1, x2, pts, jac, hess, wts, h = self._geometry(el)
            dofs, vals = self.hspace.element_values(el, x1, x2)
            v, g, H = _to_physical(vals.reshape(len(dofs), 6, -1), jac, hess)
            out = self._elements[el] = (dofs, pts, wts, v, g, H, h)
        return out

    def boundary_segments(self, el):
        """Sides of ``el`` on the domain boundary: ``(side, xi1, xi2, fixed)`` per side."""
        lv, i, a, b = el
        n = self.mesh.nel(lv)
        out = []
        for side, hit in ((0, a == 0), (1, a == n - 1), (2, b == 0), (3, b == n - 1)):
            if not hit:
                continue
            eid = self.geom.side_edge[(i, side)]
            if self.geom.edges[eid].kind == "boundary":
                out.append(side)
        return out

    def boundary(self, el, side):
        """``(dofs, pts, wts, u, grad, normal, h)`` at Gauss points of a boundary side."""
        (a0, a1), (b0, b1) = self.mesh.param_rect(el)
        s1 = a0 + (a1 - a0) * self.t
        s2 = b0 + (b1 - b0) * self.t
        if side in (0, 1):
            x1 = np.array([0.0 if side == 0 else 1.0])
            x2 = s2
            seg = b1 - b0
        else:
            x1 = s1
            x2 = np.array([0.0 if side == 2 else 1.0])
            seg = a1 - a0
        dofs, vals = self.hspace.element_values(el, x1, x2)
        xi = np.stack(np.meshgrid(x1, x2, indexing="ij"), -1).reshape(-1, 2)
        pts, jac, hess = self.geom.patches[el[1]].evaluate(xi, 2)
        along = 1 if side in (0, 1) else 0
        tang = jac[:, :, along]
        ds = np.linalg.norm(tang, axis=1)
        nrm = np.stack([tang[:, 1], -tang[:, 0]], -1) / ds[:, None]
        across = jac[:, :, 1 - along]
        outward = -1.0 if side in (0, 2) else 1.0
        flip = np.sign(np.einsum("qi,qi->q", nrm, across)) * outward
        nrm *= flip[:, None]
        wts = self.w * seg * ds
        v, g, _ = _to_physical(vals.reshape(len(dofs), 6, -1), jac, hess)
        return dofs, pts, wts, v, g, nrm, element_diameter(self.geom, self.mesh, el)


# ---------------------------------------------------------------------------
# systems


@dataclass
class DiscreteSystem:
    hspace: HierarchicalSpace
    problem: ModelProblem
    matrix: sps.csr_matrix
    rhs: np.ndarray
    coeffs: np.ndarray | None = None
    boundary_dofs: np.ndarray | None = None
    bc_weighting: str = "scaled"


def _scatter(rows, cols, vals, dofs, K):
    d = np.asarray(dofs)
    rows.append(np.repeat(d, len(d)))
    cols.append(np.tile(d, len(d)))
    vals.append(K.ravel())


def assemble_poisson(hspace: HierarchicalSpace, problem: ModelProblem, gamma: float | None = None,
                     quad: Quadrature | None = None) -> DiscreteSystem:
    """Stiffness matrix with Nitsche terms, ``gamma = 10 (p + 1)`` by default."""
    quad = quad or Quadrature(hspace)
    gamma = 10.0 * (hspace.p + 1) if gamma is None else gamma
    n = hspace.ndof
    rows, cols, vals = [], [], []
    F = np.zeros(n)
    for el in hspace.mesh.active_elements():
        dofs, pts, w, v, g, H, h = quad.element(el)
        if not dofs:
            continue
        K = np.einsum("q,fqi,gqi->fg", w, g, g)
        _scatter(rows, cols, vals, dofs, K)
        np.add.at(F, dofs, v @ (w * problem.f(pts)))
        for side in quad.boundary_segments(el):
            dofs_b, pb, wb, vb, gb, nb, hb = quad.boundary(el, side)
            dn = np.einsum("fqi,qi->fq", gb, nb)
            Kb = -(dn * wb) @ vb.T
            Kb = Kb + Kb.T + (gamma / hb) * (vb * wb) @ vb.T
            _scatter(rows, cols, vals, dofs_b, Kb)
            gval = problem.u(pb)
            np.add.at(F, dofs_b, -(dn @ (wb * gval)) + (gamma / hb) * (vb @ (wb * gval)))
    A = _build(rows, cols, vals, n)
    return DiscreteSystem(hspace, problem, A, F)


def _build(rows, cols, vals, n):
    if not rows:
        return sps.csr_matrix((n, n))
    A = sps.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def boundary_dofs(hspace: HierarchicalSpace) -> np.ndarray:
    """Dofs with a nonzero coefficient on the first two B-spline rows at a boundary side."""
    geom = hspace.mesh.geom
    bsides = {}
    for (i, side), eid in geom.side_edge.items():
        if geom.edges[eid].kind == "boundary":
            bsides.setdefault(i, []).append(side)
    out = []
    for d, terms in enumerate(hspace.terms):
        hit = False
        for lv, key, _ in terms:
            n = hspace.stack.space(lv).n
            for i, blk in hspace.stack.space(lv).coeffs(key).items():
                for side in bsides.get(i, ()):
                    if side in (0, 1):
                        idx = np.arange(blk.o1, blk.o1 + blk.c.shape[0])
                        sel = (idx <= 1) if side == 0 else (idx >= n - 2)
                        hit = hit or bool(np.any(blk.c[sel] != 0))
                    else:
                        idx = np.arange(blk.o2, blk.o2 + blk.c.shape[1])
                        sel = (idx <= 1) if side == 2 else (idx >= n - 2)
                        hit = hit or bool(np.any(blk.c[:, sel] != 0))
            if hit:
                break
        if hit:
            out.append(d)
    return np.array(out, dtype=int)


def assemble_biharmonic(hspace: HierarchicalSpace, problem: ModelProblem,
                        quad: Quadrature | None = None) -> DiscreteSystem:
    """Matrix of ``int Lap u Lap v`` and load; boundary data are handled in :func:`solve`."""
    quad = quad or Quadrature(hspace)
    n = hspace.ndof
    rows, cols, vals = [], [], []
    F = np.zeros(n)
    for el in hspace.mesh.active_elements():
        dofs, pts, w, v, g, H, h = quad.element(el)
        if not dofs:
            continue
        lap = H[:, :, 0, 0] + H[:, :, 1, 1]
        _scatter(rows, cols, vals, dofs, (lap * w) @ lap.T)
        np.add.at(F, dofs, v @ (w * problem.f(pts)))
    return DiscreteSystem(hspace, problem, _build(rows, cols, vals, n), F,
                          boundary_dofs=boundary_dofs(hspace))


def boundary_trace(hspace: HierarchicalSpace, problem: ModelProblem, bdofs, quad: Quadrature | None = None,
                   weighting: str = "scaled"):
    """Value and normal-derivative rows of the boundary dofs and the data.

    ``weighting="equal"`` scales every row by the square root of its
    quadrature weight; ``"scaled"`` further multiplies value rows by
    ``h^(-3/2)`` and derivative rows by ``h^(-1/2)``, mimicking the trace norms
    of H2.
    """
    if weighting not in ("equal", "scaled"):
        raise ValueError("weighting must be 'equal' or 'scaled'")
    quad = quad or Quadrature(hspace)
    col = {d: n for n, d in enumerate(bdofs)}
    rows_A, rhs = [], []
    for el in hspace.mesh.active_elements():
        for side in quad.boundary_segments(el):
            dofs, pts, w, v, g, nrm, h = quad.boundary(el, side)
            sw = np.sqrt(w)
            sv, sd = (sw * h ** -1.5, sw * h ** -0.5) if weighting == "scaled" else (sw, sw)
            Av = np.zeros((len(w), len(bdofs)))
            Ad = np.zeros((len(w), len(bdofs)))
            dn = np.einsum("fqi,qi->fq", g, nrm)
            for k, d in enumerate(dofs):
                if d in col:
                    Av[:, col[d]] = v[k] * sv
                    Ad[:, col[d]] = dn[k] * sd
            rows_A += [Av, Ad]
            rhs += [problem.u(pts) * sv, np.einsum("qi,qi->q", problem.grad(pts), nrm) * sd]
    return np.vstack(rows_A), np.concatenate(rhs)


def boundary_lift(hspace: HierarchicalSpace, problem: ModelProblem, bdofs, quad: Quadrature | None = None,
                  weighting: str = "scaled"):
    """Least-squares boundary lift and a basis of boundary-dof combinations with zero trace.

    Returns ``(c, N)``: ``c`` fits value and normal derivative on the boundary,
    the columns of ``N`` leave both unchanged and stay free in the solve.
    """
    A, b = boundary_trace(hspace, problem, bdofs, quad, weighting)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int(np.sum(s > 1e-10 * s[0])) if len(s) else 0
    c = Vt[:rank].T @ ((U[:, :rank].T @ b) / s[:rank])
    return c, Vt[rank:].T


def solve(system: DiscreteSystem) -> np.ndarray:
    """Solve the discrete system; the biharmonic case first lifts the boundary data."""
    A, F = system.matrix, system.rhs
    n = A.shape[0]
    asym = abs(A - A.T).max() if A.nnz else 0.0
    if asym > 1e-10 * max(abs(A).max(), 1.0):
        raise SolverError(f"matrix is not symmetric (defect {asym:.2e})")
    if system.problem.kind == "poisson":
        u = _direct(A, F)
    else:
        bd = system.boundary_dofs
        inner = np.setdiff1d(np.arange(n), bd)
        u = np.zeros(n)
        lift, N = boundary_lift(system.hspace, system.problem, bd, weighting=system.bc_weighting)
        u[bd] = lift
        # free unknowns: interior dofs and trace-free combinations of boundary dofs
        Z = sps.hstack([sps.identity(n, format="csr")[:, inner],
                        sps.csr_matrix((np.zeros((n, 0)) if N.shape[1] == 0 else
                                        _embed(N, bd, n)))]).tocsr()
        y = _direct((Z.T @ A @ Z).tocsc(), Z.T @ (F - A @ u))
        u = u + Z @ y
    system.coeffs = u
    return u


def _embed(N, rows, n):
    out = np.zeros((n, N.shape[1]))
    out[rows] = N
    return out


def _direct(A, b):
    try:
        lu = spla.splu(sps.csc_matrix(A))
    except RuntimeError as exc:
        raise SolverError(f"singular system of size {A.shape[0]}: {exc}") from exc
    x = lu.solve(b)
    res = np.abs(A @ x - b).max()
    if not np.isfinite(res) or res > 1e-6 * max(np.abs(b).max(), 1.0):
        raise SolverError(f"inaccurate solve (residual {res:.2e}); the basis may be dependent")
    return x


# ---------------------------------------------------------------------------
# estimators and errors


def residual_estimator(system: DiscreteSystem, quad: Quadrature | None = None) -> dict:
    """``h_Q^2 ||f + Lap u_h||^2_Q`` per active element (squared indicators)."""
    quad = quad or Quadrature(system.hspace)
    u = system.coeffs
    out = {}
    for el in system.hspace.mesh.active_elements():
        dofs, pts, w, v, g, H, h = quad.element(el)
        lap = (H[:, :, 0, 0] + H[:, :, 1, 1]).T @ u[dofs] if dofs else 0.0
        out[el] = h * h * float(np.sum(w * (system.problem.f(pts) + lap) ** 2))
    return out


def bubble_basis(p: int, t):
    """Univariate bubbles ``t^2 (1-t)^2 B_i^{p-3}(t)`` and two derivatives, ``(3, p-2, len(t))``."""
    t = np.asarray(t, dtype=float)
    m = p - 3
    out = np.zeros((3, m + 1, len(t)))
    for i in range(m + 1):
        coef = np.zeros(m + 1)
        coef[i] = 1.0
        bern = np.polynomial.Polynomial([0.0])
        for k in range(m + 1):
            bern = bern + coef[k] * math.comb(m, k) * np.polynomial.Polynomial([0, 1]) ** k * \
                np.polynomial.Polynomial([1, -1]) ** (m - k)
        poly = np.polynomial.Polynomial([0, 0, 1, -2, 1]) * bern
        for d in range(3):
            out[d, i] = poly.deriv(d)(t) if d else poly(t)
    return out


def bubble_estimator(system: DiscreteSystem, quad: Quadrature | None = None, order=None) -> dict:
    """Energy norms of element bubble corrections (squared indicators)."""
    hs = system.hspace
    quad = quad or Quadrature(hs, hs.p + 3)
    p = hs.p
    u = system.coeffs
    bb = bubble_basis(p, quad.t)
    nb = p - 2
    out = {}
    elems = hs.mesh.active_elements() if order is None else list(order)
    for el in elems:
        dofs, pts, w, v, g, H, h = quad.element(el)
        (a0, a1), (b0, b1) = hs.mesh.param_rect(el)
        s1, s2 = 1.0 / (a1 - a0), 1.0 / (b1 - b0)
        vals = np.zeros((nb * nb, 6, len(quad.t), len(quad.t)))
        for i in range(nb):
            for j in range(nb):
                f = i * nb + j
                vals[f, 0] = np.outer(bb[0, i], bb[0, j])
                vals[f, 1] = s1 * np.outer(bb[1, i], bb[0, j])
                vals[f, 2] = s2 * np.outer(bb[0, i], bb[1, j])
                vals[f, 3] = s1 * s1 * np.outer(bb[2, i], bb[0, j])
                vals[f, 4] = s1 * s2 * np.outer(bb[1, i], bb[1, j])
                vals[f, 5] = s2 * s2 * np.outer(bb[0, i], bb[2, j])
        jac, hess = quad._geometry(el)[3:5]
        bv, _, bH = _to_physical(vals.reshape(nb * nb, 6, -1), jac, hess)
        blap = bH[:, :, 0, 0] + bH[:, :, 1, 1]
        ulap = (H[:, :, 0, 0] + H[:, :, 1, 1]).T @ u[dofs] if dofs else np.zeros(len(w))
        A = (blap * w) @ blap.T
        rhs = bv @ (w * system.problem.f(pts)) - blap @ (w * ulap)
        e = np.linalg.solve(A, rhs)
        out[el] = float(e @ A @ e)
    return out


def error_norms(system: DiscreteSystem, quad: Quadrature | None = None) -> dict:
    """H1 and H2 seminorm errors of the discrete solution."""
    hs = system.hspace
    quad = quad or Quadrature(hs, hs.p + 3)
    u = system.coeffs
    e1 = e2 = 0.0
    for el in hs.mesh.active_elements():
        dofs, pts, w, v, g, H, h = quad.element(el)
        gh = np.einsum("f,fqi->qi", u[dofs], g) if dofs else 0.0
        Hh = np.einsum("f,fqij->qij", u[dofs], H) if dofs else 0.0
        e1 += float(np.sum(w * np.sum((system.problem.grad(pts) - gh) ** 2, axis=1)))
        e2 += float(np.sum(w * np.sum((system.problem.hess(pts) - Hh) ** 2, axis=(1, 2))))
    return {"h1": math.sqrt(e1), "h2": math.sqrt(e2)}


def dorfler_mark(estimates: dict, theta: float) -> list:
    """Smallest set of elements carrying ``theta^2`` of the total squared estimator."""
    items = sorted(estimates.items(), key=lambda kv: (-kv[1], kv[0]))
    total = sum(v for _, v in items)
    if total <= 0:
        return []
    goal = theta * theta * total
    out, acc = [], 0.0
    for el, v in items:
        if acc >= goal * (1 - 1e-14) or v <= 0:
            break
        out.append(el)
        acc += v
    return out


# ---------------------------------------------------------------------------
# driver


def _solve_on(mesh, stack, mode, problem, bc_weighting="scaled"):
    hs = HierarchicalSpace(mesh, stack, mode)
    if problem.kind == "poisson":
        quad = Quadrature(hs)
        sysm = assemble_poisson(hs, problem, quad=quad)
        solve(sysm)
        est = residual_estimator(sysm, quad)
    else:
        quad = Quadrature(hs, hs.p + 3)
        sysm = assemble_biharmonic(hs, problem, quad=quad)
        sysm.bc_weighting = bc_weighting
        solve(sysm)
        est = bubble_estimator(sysm, quad)
    return hs, sysm, est, quad


def adaptive_loop(geom: MultiPatchGeometry, problem: ModelProblem, cfg: RunConfig, log=None,
                  check: bool = False) -> dict:
    """SOLVE, ESTIMATE, MARK, REFINE until a stop criterion holds.

    With ``check`` every space is audited for property (P1) and the
    admissibility class before it is used.
    Returns ``{"rows": ledger rows, "mesh": final mesh, "system": final system}``.
    """
    stack = LevelStack(geom, cfg.p, cfg.r, cfg.k0)
    mesh = HierarchicalMesh(geom, cfg.k0)
    adm = AdmissibilityConfig(cfg.mu, cfg.variant)
    rows = []
    sysm = None
    for it in range(cfg.max_iter):
        t0 = time.perf_counter()
        hs, sysm, est, quad = _solve_on(mesh, stack, cfg.mode, problem, cfg.bc_weighting)
        if check:
            ok, witnesses = check_P1(hs)
            if not ok:
                raise SolverError(f"iteration {it}: property P1 fails on level {witnesses[0][0]}")
            cls = admissibility_class(hs)
            if cls > cfg.mu:
                raise SolverError(f"iteration {it}: mesh is {cls}-admissible, expected at most {cfg.mu}")
        err = error_norms(sysm, quad)
        row = {"iter": it, "ndof": hs.ndof, "levels": mesh.depth,
               "err": err["h1"] if problem.kind == "poisson" else err["h2"],
               "estimator": math.sqrt(sum(est.values())), "seconds": time.perf_counter() - t0}
        rows.append(row)
        if log:
            log(row)
        if mesh.depth >= cfg.max_levels or hs.ndof >= cfg.max_ndof:
            break
        marked = dorfler_mark(est, cfg.theta)
        if not marked:
            break
        before = len(mesh.active_elements())
        refine(mesh, stack, marked, adm)
        if len(mesh.active_elements()) == before:
            raise SolverError("refinement stalled with a nonzero estimator")
    return {"rows": rows, "mesh": mesh, "system": sysm}


def uniform_loop(geom: MultiPatchGeometry, problem: ModelProblem, cfg: RunConfig, levels: int, log=None) -> dict:
    """Solve on the one-level spaces with ``k0, 2 k0 + 1, ...``."""
    rows = []
    sysm = None
    for lv in range(levels):
        t0 = time.perf_counter()
        k = ((cfg.k0 + 1) << lv) - 1
        stack = LevelStack(geom, cfg.p, cfg.r, k)
        mesh = HierarchicalMesh(geom, k)
        hs, sysm, est, quad = _solve_on(mesh, stack, "plain", problem, cfg.bc_weighting)
        err = error_norms(sysm, quad)
        row = {"iter": lv, "ndof": hs.ndof, "levels": lv + 1,
               "err": err["h1"] if problem.kind == "poisson" else err["h2"],
               "estimator": math.sqrt(sum(est.values())), "seconds": time.perf_counter() - t0}
        rows.append(row)
        if log:
            log(row)
    return {"rows": rows, "system": sysm}


def loglog_slope(ndof, err) -> float:
    x = np.log(np.asarray(ndof, dtype=float))
    y = np.log(np.asarray(err, dtype=float))
    return float(np.polyfit(x, y, 1)[0])
