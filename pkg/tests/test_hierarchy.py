import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c1hier.adaptivity import AdmissibilityConfig, refine
from c1hier.c1basis import J_CHI
from c1hier.cli_io import BUILTINS
from c1hier.hierarchy import (HierarchicalMesh, HierarchicalSpace, LevelStack, StructureError, check_P1,
                              collocation_matrix, eval_hier, global_rank, numerical_rank, select_active,
                              truncate, vertex_audit)
from c1hier.splinecore import ParameterError, dyadic_refine_matrix


def corner_ring(geom, vertex, cells, level=0, k0=3):
    n = (k0 + 1) << level
    return [(level, i) + tuple(code.index_to_patch(a, b, n)) for i, code in vertex.fan for a, b in cells]


def inner_vertex(geom):
    return next(v for v in geom.vertices if v.kind == "inner")


def test_coarsest_mesh_size(threepatch):
    with pytest.raises(ParameterError):
        HierarchicalMesh(threepatch, 2)


def test_mesh_refine_and_cover(square2):
    mesh = HierarchicalMesh(square2, 3)
    mesh.refine([(0, 0, 1, 2)])
    assert not mesh.is_active((0, 0, 1, 2))
    kids = HierarchicalMesh.children((0, 0, 1, 2))
    assert all(mesh.is_active(c) for c in kids)
    assert len(mesh.active_elements()) == 32 - 1 + 4
    assert sorted(mesh.cover((0, 0, 1, 2))) == sorted(kids)
    assert mesh.cover((1, 0, 2, 4)) == [(1, 0, 2, 4)]
    assert mesh.cover((1, 0, 0, 0)) == [(0, 0, 0, 0)]


@pytest.mark.parametrize("name", BUILTINS)
def test_masks_pointwise(name, stacks):
    st_ = stacks[name]
    rng = np.random.default_rng(0)
    coarse, fine = st_.space(0), st_.space(1)
    for key in coarse.keys():
        mask = st_.mask(0, key)
        for i in {i for i in coarse.coeffs(key)}:
            xi = rng.random((100, 2))
            want = coarse.eval_param(key, i, xi)[:, 0]
            got = sum(c * fine.eval_param(fk, i, xi)[:, 0] for fk, c in mask.items())
            assert np.abs(got - want).max() < 1e-10


def test_interior_mask_is_tensor_insertion(stacks):
    st_ = stacks["square-1p"]
    L = dyadic_refine_matrix(st_.space(0).space).toarray()
    key = ("I", 0, 4, 5)
    mask = st_.mask(0, key)
    want = {("I", 0, a, b): L[4, a] * L[5, b] for a in range(L.shape[1]) for b in range(L.shape[1])
            if L[4, a] * L[5, b] != 0}
    assert mask.keys() == want.keys()
    assert all(abs(mask[k] - want[k]) < 1e-14 for k in want)


@pytest.mark.parametrize("name", BUILTINS)
def test_vertex_mask_diagonal(name, stacks):
    st_ = stacks[name]
    for v in st_.geom.vertices:
        D = np.array([[st_.mask(0, ("V", v.id, j)).get(("V", v.id, jj), 0.0) for jj in range(6)]
                      for j in range(6)])
        assert np.allclose(D, np.diag([0.5 ** sum(J_CHI[j]) for j in range(6)]), atol=1e-12)
    assert [0.5 ** sum(c) for c in J_CHI] == [1, 0.5, 0.25, 0.5, 0.25, 0.25]


def test_expand_is_composed_masks(stacks):
    st_ = stacks["threepatch-ev3"]
    key = ("V", 0, 4)
    two = st_.expand(0, key, 2)
    xi = np.random.default_rng(2).random((50, 2))
    want = st_.space(0).eval_param(key, 1, xi)[:, 0]
    got = sum(c * st_.space(2).eval_param(k, 1, xi)[:, 0] for k, c in two.items())
    assert np.abs(got - want).max() < 1e-10


def test_one_level_mesh_activates_everything(stacks):
    st_ = stacks["lshape-8p"]
    hs = HierarchicalSpace(HierarchicalMesh(st_.geom, 3), st_)
    assert sorted(k for _, k in hs.active) == sorted(st_.space(0).keys())
    assert hs.ndof == st_.space(0).dim


def test_whole_patch_refined(stacks):
    st_ = stacks["square-2p"]
    g = st_.geom
    mesh = HierarchicalMesh(g, 3)
    mesh.refine([(0, 1, a, b) for a in range(4) for b in range(4)])
    act = select_active(mesh, st_)
    lv0 = {k for lv, k in act if lv == 0}
    assert not any(k[0] == "I" and k[1] == 1 for k in lv0)
    inner = next(e for e in g.edges if e.kind == "inner")
    assert set(st_.space(0).edge_keys(inner.id)) <= lv0
    assert any(k[0] == "I" and k[1] == 1 for lv, k in act if lv == 1)


def test_mismatched_stack(threepatch, stacks):
    with pytest.raises(StructureError):
        HierarchicalSpace(HierarchicalMesh(threepatch, 4), stacks["threepatch-ev3"])


def two_level(st_, cells):
    mesh = HierarchicalMesh(st_.geom, 3)
    mesh.refine(cells)
    return mesh


def test_truncation_untouched_function(stacks):
    st_ = stacks["square-1p"]
    mesh = two_level(st_, [(0, 0, 0, 0)])
    assert truncate(mesh, st_, 0, ("I", 0, 6, 6)) == [(0, ("I", 0, 6, 6), 1.0)]


@pytest.mark.parametrize("name", BUILTINS)
def test_truncated_equals_mother_outside(name, stacks):
    st_ = stacks[name]
    g = st_.geom
    mesh = HierarchicalMesh(g, 3)
    refine(mesh, st_, corner_ring(g, g.vertices[0], [(0, 0)]), AdmissibilityConfig(2, "T"))
    act = mesh.active_elements()
    refine(mesh, st_, [q for q in act if q[0] == 1][:2], AdmissibilityConfig(2, "T"))
    plain = HierarchicalSpace(mesh, st_, "plain")
    trunc = HierarchicalSpace(mesh, st_, "truncated")
    assert plain.active == trunc.active
    t = np.array([0.2, 0.5, 0.9])
    for el in mesh.active_elements():
        (a0, a1), (b0, b1) = mesh.param_rect(el)
        xi = np.array([(a0 + (a1 - a0) * x, b0 + (b1 - b0) * y) for x in t for y in t])
        near = {d for d, *_ in plain.element_map().get(el, [])} | {d for d, *_ in trunc.element_map().get(el, [])}
        for d in near:
            if plain.active[d][0] == el[0]:
                diff = eval_hier(plain, d, el[1], xi) - eval_hier(trunc, d, el[1], xi)
                assert np.abs(diff).max() < 1e-10


def test_span_equality(stacks):
    st_ = stacks["threepatch-ev3"]
    g = st_.geom
    mesh = HierarchicalMesh(g, 3)
    refine(mesh, st_, corner_ring(g, inner_vertex(g), [(0, 0), (1, 1)]), AdmissibilityConfig(2, "T"))
    H = collocation_matrix(HierarchicalSpace(mesh, st_, "plain"))
    T = collocation_matrix(HierarchicalSpace(mesh, st_, "truncated"))
    for A, B in ((H, T), (T, H)):
        x = np.linalg.lstsq(B, A, rcond=None)[0]
        assert np.abs(B @ x - A).max() < 1e-8


def test_P1_uniform(stacks):
    st_ = stacks["threepatch-ev3"]
    ok, w = check_P1(HierarchicalSpace(HierarchicalMesh(st_.geom, 3), st_))
    assert ok and not w


def test_P1_adversarial_witness(stacks):
    st_ = stacks["threepatch-ev3"]
    g = st_.geom
    v = inner_vertex(g)
    mesh = HierarchicalMesh(g, 3)
    mesh.refine(corner_ring(g, v, [(0, 0), (1, 0), (0, 1)]))
    hs = HierarchicalSpace(mesh, st_)
    ok, witnesses = check_P1(hs)
    assert not ok
    lv, nfun, rank, flagged = witnesses[0]
    assert lv == 0 and rank < nfun
    assert {k for _, k in flagged} == {("V", v.id, j) for j in range(6)}
    assert numerical_rank(collocation_matrix(hs)) < hs.ndof


def test_P1_after_admissible_refinement(stacks):
    st_ = stacks["threepatch-ev3"]
    g = st_.geom
    mesh = HierarchicalMesh(g, 3)
    refine(mesh, st_, corner_ring(g, inner_vertex(g), [(0, 0), (1, 0), (0, 1)]), AdmissibilityConfig(2, "H"))
    hs = HierarchicalSpace(mesh, st_)
    assert check_P1(hs)[0] and not vertex_audit(hs)
    assert global_rank(hs) == hs.ndof


@settings(max_examples=8)
@given(st.sampled_from(["square-2p", "threepatch-ev3"]), st.integers(0, 10_000), st.sampled_from(["H", "T"]))
def test_random_refinement_stays_independent(name, seed, variant):
    from c1hier.cli_io import builtin_geometry
    g = builtin_geometry(name)
    st_ = LevelStack(g, 3, 1, 3)
    mesh = HierarchicalMesh(g, 3)
    rng = np.random.default_rng(seed)
    for _ in range(2):
        act = mesh.active_elements()
        refine(mesh, st_, [act[i] for i in rng.choice(len(act), 2, replace=False)], AdmissibilityConfig(2, variant))
    hs = HierarchicalSpace(mesh, st_, "truncated" if variant == "T" else "plain")
    assert check_P1(hs)[0]
    assert global_rank(hs) == hs.ndof
    # partition of unity: constants are reproduced by the sum of all mother functions
    plain = HierarchicalSpace(mesh, st_, "plain")
    M = collocation_matrix(plain)
    c = np.linalg.lstsq(M, np.ones(len(M)), rcond=None)[0]
    assert np.abs(M @ c - 1).max() < 1e-9
