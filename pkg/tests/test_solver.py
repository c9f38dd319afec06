import math
import random

import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from c1hier.adaptivity import AdmissibilityConfig, refine
from c1hier.cli_io import BUILTINS, builtin_geometry
from c1hier.config import RunConfig
from c1hier.hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack
from c1hier.solver import (LSHAPE_Z, DiscreteSystem, ModelProblem, Quadrature, SolverError, adaptive_loop,
                           assemble_biharmonic, assemble_poisson, biharmonic_lshape, biharmonic_polynomial,
                           bubble_basis, bubble_estimator, dorfler_mark, element_diameter, error_norms,
                           loglog_slope, make_problem, poisson_polynomial, poisson_ridge, poisson_singular, poisson_smooth,
                           residual_estimator, solve, uniform_loop)


def fd_check(problem, pts, h=1e-5):
    """Gradient and Hessian of a model problem against central differences."""
    for x in pts:
        g = problem.grad(x[None])[0]
        H = problem.hess(x[None])[0]
        for a in range(2):
            e = np.zeros(2)
            e[a] = h
            du = (problem.u((x + e)[None]) - problem.u((x - e)[None]))[0] / (2 * h)
            dg = (problem.grad((x + e)[None]) - problem.grad((x - e)[None]))[0] / (2 * h)
            assert abs(du - g[a]) < 1e-6 * max(1, abs(g[a]))
            assert np.allclose(dg, H[:, a], atol=1e-5 * max(1, np.abs(H).max()))


def laplacian(problem, x):
    H = problem.hess(x)
    return H[:, 0, 0] + H[:, 1, 1]


PTS = np.array([[0.3, 0.4], [-0.5, 0.2], [-0.2, -0.7], [0.8, 0.9]])


@pytest.mark.parametrize("problem", [poisson_singular(), poisson_polynomial(), poisson_smooth(), poisson_ridge(),
                                     biharmonic_lshape(), biharmonic_lshape(homogeneous=True),
                                     biharmonic_polynomial()])
def test_problem_derivatives(problem):
    fd_check(problem, PTS)


@pytest.mark.parametrize("problem", [poisson_singular((0.1, -0.2)), poisson_polynomial(), poisson_smooth(),
                                     poisson_ridge()])
def test_poisson_load(problem):
    assert np.allclose(problem.f(PTS), -laplacian(problem, PTS), rtol=1e-12)


@pytest.mark.parametrize("problem", [biharmonic_lshape(), biharmonic_lshape(homogeneous=True), biharmonic_polynomial()])
def test_biharmonic_solutions(problem):
    h = 1e-3
    for x in PTS:
        stencil = np.array([x, x + [h, 0], x - [h, 0], x + [0, h], x - [0, h]])
        L = laplacian(problem, stencil)
        bilap = (L[1:].sum() - 4 * L[0]) / h ** 2
        assert abs(bilap) < 1e-4 * max(1.0, abs(L[0]))


def test_lshape_exponent():
    w = 1.5 * math.pi
    z = brentq(lambda s: math.sin(s * w) + s * math.sin(w), 0.1, 0.9)
    assert abs(z - LSHAPE_Z) < 1e-12
    assert abs(math.sin(LSHAPE_Z * w) + LSHAPE_Z * math.sin(w)) < 1e-13


def test_lshape_boundary_data():
    s = np.linspace(0.05, 1, 12)
    right = np.stack([s, 0 * s], 1)
    down = np.stack([0 * s, -s], 1)
    for prob in (biharmonic_lshape(), biharmonic_lshape(homogeneous=True)):
        assert np.abs(prob.u(right)).max() < 1e-12
        assert np.abs(prob.grad(right)[:, 1]).max() < 1e-12
    hom = biharmonic_lshape(homogeneous=True)
    assert np.abs(hom.u(down)).max() < 1e-12 and np.abs(hom.grad(down)[:, 0]).max() < 1e-12
    assert np.abs(biharmonic_lshape().u(down)).max() > 1e-3


def test_make_problem(threepatch, lshape):
    assert make_problem("poisson", "singular", threepatch).u(np.zeros((1, 2)))[0] == 0
    P = next(v for v in lshape.vertices if v.kind == "inner").point
    assert make_problem("poisson", "singular", lshape).u(P[None])[0] == 0
    assert make_problem("biharmonic", "lshape").name == "lshape"
    with pytest.raises(ValueError):
        make_problem("poisson", "nope")


def one_level(geom, k0=3, p=3):
    stack = LevelStack(geom, p, p - 2, k0)
    return HierarchicalSpace(HierarchicalMesh(geom, k0), stack)


def test_element_diameter(geometries):
    g = geometries["square-1p"]
    mesh = HierarchicalMesh(g, 3)
    assert element_diameter(g, mesh, (0, 0, 1, 2)) == pytest.approx(math.sqrt(2) / 4)


def test_constant_reproduced(geometries):
    hs = one_level(geometries["threepatch-ev3"])
    sysm = assemble_poisson(hs, poisson_polynomial(1.7, 0, 0, 0))
    solve(sysm)
    assert error_norms(sysm)["h1"] < 1e-10


@pytest.mark.parametrize("name", BUILTINS)
def test_bilinear_reproduced(name):
    hs = one_level(builtin_geometry(name))
    sysm = assemble_poisson(hs, poisson_polynomial())
    solve(sysm)
    assert error_norms(sysm)["h1"] < 1e-9
    assert max(residual_estimator(sysm).values()) < 1e-9


def test_bilinear_reproduced_on_refined_mesh(stacks):
    stk = stacks["square-2p"]
    mesh = HierarchicalMesh(stk.geom, 3)
    refine(mesh, stk, [(0, 0, 3, 1), (0, 1, 0, 0)], AdmissibilityConfig(2, "T"))
    for mode in ("plain", "truncated"):
        sysm = assemble_poisson(HierarchicalSpace(mesh, stk, mode), poisson_polynomial())
        solve(sysm)
        assert error_norms(sysm)["h1"] < 1e-9


def test_singular_assembly(geometries):
    hs = one_level(geometries["threepatch-ev3"])
    sysm = assemble_poisson(hs, poisson_singular())
    A = sysm.matrix
    assert np.all(np.isfinite(A.data)) and np.all(np.isfinite(sysm.rhs))
    assert abs(A - A.T).max() < 1e-10 * abs(A).max()


def test_asymmetric_matrix_rejected(geometries):
    hs = one_level(geometries["square-1p"])
    sysm = assemble_poisson(hs, poisson_polynomial())
    bad = sysm.matrix.tolil()
    bad[0, 1] += 1.0
    with pytest.raises(SolverError):
        solve(DiscreteSystem(hs, sysm.problem, bad.tocsr(), sysm.rhs))


def test_singular_matrix_rejected(geometries):
    hs = one_level(geometries["square-1p"])
    n = hs.ndof
    with pytest.raises(SolverError):
        solve(DiscreteSystem(hs, poisson_polynomial(), sps.csr_matrix((n, n)), np.ones(n)))


def zero_problem():
    def zero(x):
        return np.zeros(len(x))
    return ModelProblem("biharmonic", zero, lambda x: np.zeros((len(x), 2)), lambda x: np.zeros((len(x), 2, 2)),
                        zero, "zero")


def test_zero_data_zero_solution(geometries):
    hs = one_level(geometries["lshape-8p"])
    sysm = assemble_biharmonic(hs, zero_problem())
    assert np.abs(solve(sysm)).max() < 1e-12


@pytest.mark.parametrize("name", BUILTINS)
def test_biquadratic_reproduced(name):
    hs = one_level(builtin_geometry(name))
    sysm = assemble_biharmonic(hs, biharmonic_polynomial())
    solve(sysm)
    assert error_norms(sysm)["h2"] < 1e-8
    assert max(bubble_estimator(sysm).values()) < 1e-9


def test_biquadratic_with_equal_weights(square2):
    hs = one_level(square2)
    sysm = assemble_biharmonic(hs, biharmonic_polynomial())
    sysm.bc_weighting = "equal"
    solve(sysm)
    assert error_norms(sysm)["h2"] < 1e-8


@given(st.integers(3, 6), st.floats(0, 1))
def test_bubbles_vanish_on_boundary(p, t):
    b = bubble_basis(p, [0.0, 1.0])
    assert np.abs(b[:2]).max() < 1e-12
    inner = bubble_basis(p, [t])
    assert inner.shape == (3, p - 2, 1)


def test_bubble_estimator_order_independent(geometries):
    hs = one_level(geometries["lshape-8p"])
    sysm = assemble_biharmonic(hs, biharmonic_lshape())
    solve(sysm)
    quad = Quadrature(hs, hs.p + 3)
    els = hs.mesh.active_elements()
    a = bubble_estimator(sysm, quad)
    shuffled = els[:]
    random.Random(4).shuffle(shuffled)
    b = bubble_estimator(sysm, Quadrature(hs, hs.p + 3), order=shuffled)
    assert a == b


def test_dorfler_all():
    est = {(0, 0, i, 0): float(i + 1) for i in range(5)}
    est[(0, 0, 9, 9)] = 0.0
    assert sorted(dorfler_mark(est, 1.0)) == sorted(k for k, v in est.items() if v > 0)


@given(st.integers(1, 200))
def test_dorfler_uniform(n):
    est = {(0, 0, i, 0): 1.0 for i in range(n)}
    assert len(dorfler_mark(est, 0.8)) == math.ceil(0.64 * n - 1e-9)


def test_dorfler_dominant():
    est = {(0, 0, i, 0): 0.01 for i in range(20)}
    est[(0, 1, 0, 0)] = 5.0
    assert dorfler_mark(est, 0.8) == [(0, 1, 0, 0)]
    assert dorfler_mark({}, 0.8) == []


@given(st.dictionaries(st.tuples(st.just(0), st.just(0), st.integers(0, 30), st.integers(0, 3)),
                       st.floats(0, 10), min_size=1), st.floats(0.1, 1.0))
def test_dorfler_minimal(est, theta):
    marked = dorfler_mark(est, theta)
    total = sum(est.values())
    got = sum(est[k] for k in marked)
    assert got >= theta ** 2 * total * (1 - 1e-12)
    if marked:
        assert got - est[marked[-1]] < theta ** 2 * total
        assert min(est[k] for k in marked) >= max((v for k, v in est.items() if k not in marked), default=0)


def test_adaptive_trace(threepatch):
    cfg = RunConfig(max_ndof=2000)
    rows = adaptive_loop(threepatch, poisson_singular(), cfg)["rows"]
    nd = [r["ndof"] for r in rows]
    assert nd == sorted(set(nd)) and nd[-1] >= 2000
    est = [r["estimator"] for r in rows]
    assert all(b <= 1.2 * a for a, b in zip(est, est[1:]))
    eff = [r["estimator"] / r["err"] for r in rows]
    assert 0.1 <= min(eff) and max(eff) <= 100


def test_smooth_uniform_rate(geometries):
    rows = uniform_loop(geometries["square-1p"], poisson_smooth(), RunConfig(example="smooth"), 3)["rows"]
    err = [r["err"] for r in rows]
    # third order in h for p = 3
    assert all(6 < a / b < 10 for a, b in zip(err, err[1:]))


def test_loglog_slope():
    n = np.array([10, 100, 1000])
    assert loglog_slope(n, 3 * n ** -1.5) == pytest.approx(-1.5)


def test_stop_at_levels(square2):
    cfg = RunConfig(geometry="square-2p", max_levels=2)
    out = adaptive_loop(square2, poisson_singular((0.5, 0.5)), cfg)
    assert out["mesh"].depth == 2 and len(out["rows"]) >= 2


def test_galerkin_residual(threepatch):
    sysm = assemble_poisson(one_level(threepatch), poisson_singular())
    x = solve(sysm)
    assert np.linalg.norm(sysm.matrix @ x - sysm.rhs) < 1e-10 * np.linalg.norm(sysm.rhs)


def test_penalty_insensitive(geometries):
    hs = one_level(geometries["square-2p"])
    errs = []
    for gamma in (10 * 4, 20 * 4):
        sysm = assemble_poisson(hs, poisson_smooth(), gamma=gamma)
        solve(sysm)
        errs.append(error_norms(sysm)["h1"])
    assert abs(errs[1] - errs[0]) < 0.05 * errs[0]


@pytest.mark.parametrize("mode", ["plain", "truncated"])
def test_audited_adaptive_run(threepatch, mode):
    cfg = RunConfig(mode=mode, max_ndof=700)
    rows = adaptive_loop(threepatch, poisson_singular(), cfg, check=True)["rows"]
    assert len(rows) >= 3


def test_ridge_is_singular_on_the_diagonal():
    t = np.array([[0.2, 0.2], [0.5, 0.5]])
    pr = poisson_ridge()
    assert np.all(pr.u(t) == 0) and np.all(pr.grad(t) == 0) and np.all(pr.f(t) == 0)
    # u is odd in y - x
    x = np.array([[0.1, 0.7], [0.7, 0.1]])
    assert pr.u(x)[0] == pytest.approx(-pr.u(x)[1])


def test_ridge_adaptive_run():
    g = builtin_geometry("diagonal-6p")
    cfg = RunConfig(geometry="diagonal-6p", example="ridge", k0=5, mode="truncated", mu=3, max_ndof=1300)
    rows = adaptive_loop(g, make_problem("poisson", "ridge", g), cfg)["rows"]
    err = [r["err"] for r in rows]
    assert len(err) >= 3 and all(b < a for a, b in zip(err, err[1:]))
