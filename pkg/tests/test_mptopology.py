import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from c1hier.cli_io import BUILTINS, builtin_geometry, dumps_geometry, geometry_from_dict, geometry_to_dict
from c1hier.mptopology import (IDENTITY, GeometryError, MultiPatchGeometry, OrientationCode, Patch,
                               asg1_check, edge_frames, edge_vectors, g1_residual, gluing_from_patches)

codes = st.sampled_from(OrientationCode.all())
unit = st.floats(0, 1)


def bilinear(p00, p10, p01, p11):
    return Patch(np.array([[p00, p01], [p10, p11]], dtype=float), 1, 0)


def random_bilinear(seed):
    rng = np.random.default_rng(seed)
    return bilinear((0, 0), (1 + rng.random(), rng.random() * 0.3), (rng.random() * 0.3, 1 + rng.random()),
                    (1.2 + rng.random(), 1.2 + rng.random()))


def quad_net(x0, x1, degree=2):
    u = np.linspace(0, 1, degree + 1)
    return np.array([[[x0 + (x1 - x0) * a, b] for b in u] for a in u])


def test_identity_code_keeps_net():
    P = random_bilinear(0)
    assert np.array_equal(P.reorient(IDENTITY).net, P.net)


def test_reverse_is_involution():
    P = random_bilinear(1)
    c = OrientationCode(rev_u=True)
    assert np.array_equal(P.reorient(c).reorient(c).net, P.net)


def test_swap_transposes_parameters():
    P = random_bilinear(2)
    G = P.reorient(OrientationCode(swap=True))
    xi = np.random.default_rng(3).random((20, 2))
    assert np.abs(G.evaluate(xi, 0)[0] - P.evaluate(xi[:, ::-1], 0)[0]).max() < 1e-14


@given(codes, codes, st.tuples(unit, unit))
def test_code_round_trip(c, d, xi):
    xi = np.array(xi)
    assert np.allclose(c.to_local(c.to_patch(xi)), xi)
    assert np.allclose(c.compose(d).to_patch(xi), c.to_patch(d.to_patch(xi)))


@given(codes, st.integers(0, 5), st.integers(0, 5))
def test_index_maps_are_inverse(c, a, b):
    n = 6
    assert c.index_to_local(*c.index_to_patch(a, b, n), n) == (a, b)


@given(codes)
def test_reoriented_patch_matches_code(c):
    P = random_bilinear(4)
    xi = np.random.default_rng(5).random((10, 2))
    assert np.allclose(P.reorient(c).evaluate(xi, 0)[0], P.evaluate(c.to_patch(xi), 0)[0])


def test_unit_square_jacobian():
    P = bilinear((0, 0), (1, 0), (0, 1), (1, 1))
    _, jac, hess = P.evaluate(np.random.default_rng(0).random((15, 2)), 2)
    assert np.allclose(jac, np.eye(2)) and np.allclose(hess, 0)


def test_threepatch_first_patch(threepatch):
    x, jac, _ = threepatch.patches[0].evaluate(np.zeros((1, 2)), 1)
    r3 = math.sqrt(3)
    assert np.allclose(x[0], 0)
    assert np.allclose(jac[0][:, 0], [2 * (r3 + 1), -2 * (r3 - 1)])


def test_derivatives_by_differences():
    net = quad_net(0, 1)
    net[1, 1] += [0.1, -0.2]
    P = Patch(net, 2, 0)
    xi, h = np.array([[0.3, 0.6]]), 1e-6
    _, jac, hess = P.evaluate(xi, 2)
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        _, jp, _ = P.evaluate(xi + e, 1)
        _, jm, _ = P.evaluate(xi - e, 1)
        assert np.allclose(jac[0][:, a], (P.evaluate(xi + e, 0)[0][0] - P.evaluate(xi - e, 0)[0][0]) / (2 * h),
                           atol=1e-6)
        assert np.allclose(hess[0][:, :, a], (jp[0] - jm[0]) / (2 * h), atol=1e-6)


def test_bad_net_shape():
    with pytest.raises(GeometryError):
        Patch(np.zeros((3, 3, 2)), 1, 0)


def test_folded_patch_rejected():
    P = bilinear((0, 0), (1, 0), (1, 1), (0, 1))
    with pytest.raises(GeometryError):
        P.orientation()


def test_aligned_squares_trivial_gluing(square2):
    inner = [e for e in square2.edges if e.kind == "inner"]
    assert len(inner) == 1
    gd = inner[0].gluing
    for arr in (gd.alpha0, gd.alpha1):
        assert np.allclose(arr, 1)
    for arr in (gd.beta0, gd.beta1):
        assert np.allclose(arr, 0)


def test_boundary_gluing(geometries):
    for g in geometries.values():
        for e in g.edges:
            if e.kind == "boundary":
                assert np.allclose(e.gluing.alpha0, 1) and np.allclose(e.gluing.beta0, 0)


def test_threepatch_g1_identity(threepatch):
    s = np.linspace(0, 1, 50)
    for e in threepatch.edges:
        if e.kind == "inner":
            (i0, c0), (i1, c1) = e.sides
            res = g1_residual(threepatch.local_patch(i0, c0), threepatch.local_patch(i1, c1), e.gluing, s)
            assert res.max() < 1e-10


@pytest.mark.parametrize("name", BUILTINS)
def test_builtins_are_analysis_suitable(name):
    rep = asg1_check(builtin_geometry(name))
    assert all(r["ok"] for r in rep)


def test_perturbed_net_is_detected():
    left, right = quad_net(0, 0.5), quad_net(0.5, 1.0)
    G = MultiPatchGeometry([Patch(left, 2, 0), Patch(right, 2, 0)])
    e = next(e for e in G.edges if e.kind == "inner")
    bent = right.copy()
    bent[1, 1] += [0.05, 0.13]
    bent[2, 1] += [0.0, 0.1]
    (i0, c0), (i1, c1) = e.sides
    P = [Patch(left, 2, 0), Patch(bent, 2, 0)]
    res = g1_residual(P[i0].reorient(c0), P[i1].reorient(c1), e.gluing, np.linspace(0, 1, 50))
    assert res.max() > 1e-3
    with pytest.raises(GeometryError):
        MultiPatchGeometry(P)


def test_gluing_consistent_with_patches(lshape):
    for e in lshape.edges:
        if e.kind == "inner":
            (i0, c0), (i1, c1) = e.sides
            gd = gluing_from_patches(lshape.local_patch(i0, c0), lshape.local_patch(i1, c1))
            assert np.allclose(gd.beta(np.linspace(0, 1, 9)), e.gluing.beta(np.linspace(0, 1, 9)))


def test_edge_vectors_aligned_squares():
    G = MultiPatchGeometry([bilinear((0, 0), (1, 0), (0, 1), (1, 1)), bilinear((1, 0), (2, 0), (1, 1), (2, 1))])
    e = next(e for e in G.edges if e.kind == "inner")
    t, d = edge_vectors(G, e, np.linspace(0, 1, 5))
    assert np.allclose(np.abs(t), [0, 1]) and np.allclose(np.abs(d), [1, 0])


@pytest.mark.parametrize("name", BUILTINS)
def test_edge_vectors_both_sides_agree(name):
    g = builtin_geometry(name)
    s = np.linspace(0, 1, 50)
    for e in g.edges:
        if e.kind == "inner":
            t0, d0 = edge_vectors(g, e, s, 0)
            t1, d1 = edge_vectors(g, e, s, 1)
            assert np.abs(d0 - d1).max() < 1e-10 and np.allclose(t0, t1)


def test_edge_vectors_boundary(lshape):
    s = np.linspace(0, 1, 7)
    for e in lshape.edges:
        if e.kind == "boundary":
            _, d = edge_vectors(lshape, e, s)
            fr = edge_frames(lshape.local_patch(*e.sides[0]), None, s)
            assert np.allclose(d, fr["a"])


def test_topology_counts(geometries):
    g = geometries["threepatch-ev3"]
    assert sum(e.kind == "inner" for e in g.edges) == 3
    assert [v.valence for v in g.vertices if v.kind == "inner"] == [3]
    L = geometries["lshape-8p"]
    corner = [v for v in L.vertices if np.allclose(v.point, 0)]
    assert len(corner) == 1 and corner[0].kind == "boundary" and corner[0].valence == 3


def test_lshape_covers_l(lshape):
    # total area of the L with a 3*pi/2 opening at the origin
    area = 0.0
    g, w = np.polynomial.legendre.leggauss(3)
    g, w = (g + 1) / 2, w / 2
    X = np.array([(a, b) for a in g for b in g])
    W = np.outer(w, w).ravel()
    for P in lshape.patches:
        _, jac, _ = P.evaluate(X, 1)
        area += float(W @ np.abs(np.linalg.det(jac)))
    assert abs(area - 3.0) < 1e-12
    for P in lshape.patches:
        pts = P.evaluate(np.random.default_rng(0).random((30, 2)), 0)[0]
        assert not np.any((pts[:, 0] > 1e-12) & (pts[:, 1] < -1e-12))


@pytest.mark.parametrize("name", BUILTINS)
def test_geometry_round_trip(name):
    g = builtin_geometry(name)
    back = geometry_from_dict(geometry_to_dict(g))
    assert dumps_geometry(back) == dumps_geometry(g)


def test_geometry_format_version(square2):
    d = geometry_to_dict(square2)
    d["format_version"] = -1
    with pytest.raises(GeometryError):
        geometry_from_dict(d)
