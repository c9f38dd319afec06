"""Randomized refinement runs and point-refinement complexity sweeps."""
from __future__ import annotations

import numpy as np

from .adaptivity import (AdmissibilityConfig, ComplexityLedger, admissibility_class,
                         complexity_report, refine)
from .hierarchy import (HierarchicalMesh, HierarchicalSpace, LevelStack, check_P1,
                        collocation_matrix, numerical_rank, vertex_audit)
from .mptopology import MultiPatchGeometry


def random_refinement(geom: MultiPatchGeometry, p: int = 3, k0: int = 3, mu: int = 2, variant: str = "T",
                      runs: int = 5, steps: int = 3, marks: int = 2, seed: int = 0,
                      stack: LevelStack | None = None, rank_check: bool = True):
    """Yield one correctness record per random marking run."""
    rng = np.random.default_rng(seed)
    stack = stack or LevelStack(geom, p, p - 2, k0)
    cfg = AdmissibilityConfig(mu, variant)
    for run in range(runs):
        mesh = HierarchicalMesh(geom, k0)
        for _ in range(steps):
            act = mesh.active_elements()
            pick = rng.choice(len(act), size=min(marks, len(act)), replace=False)
            refine(mesh, stack, [act[i] for i in pick], cfg)
        plain = HierarchicalSpace(mesh, stack, "plain")
        ok, _ = check_P1(plain)
        rec = {"run": run, "elements": len(mesh.active_elements()), "ndof": plain.ndof, "P1": ok,
               "audit": vertex_audit(plain), "mesh": mesh}
        main = plain if variant == "H" else HierarchicalSpace(mesh, stack, "truncated")
        rec["admissibility"] = admissibility_class(main)
        if rank_check:
            full = numerical_rank(collocation_matrix(plain)) == plain.ndof
            if variant == "T":
                full = full and numerical_rank(collocation_matrix(main)) == main.ndof
            rec["full_rank"] = full
        else:
            rec["full_rank"] = None
        yield rec


def _corner_elements(mesh: HierarchicalMesh, vertex) -> list:
    out = []
    for i, code in vertex.fan:
        for lv in range(mesh.depth - 1, -1, -1):
            el = (lv, i) + tuple(code.index_to_patch(0, 0, mesh.nel(lv)))
            if mesh.is_active(el):
                out.append(el)
                break
    return out


def point_refinement(geom: MultiPatchGeometry, p: int = 3, k0: int = 3, mu: int = 2, variant: str = "T",
                     levels: int = 10, vertex: int | None = None, stack: LevelStack | None = None) -> dict:
    """Refine repeatedly at one vertex and track the closure overhead.

    Uses the first inner vertex unless ``vertex`` is given.
    """
    stack = stack or LevelStack(geom, p, p - 2, k0)
    if vertex is None:
        inner = [v for v in geom.vertices if v.kind == "inner"]
        v = inner[0] if inner else geom.vertices[0]
    else:
        v = geom.vertices[vertex]
    mesh = HierarchicalMesh(geom, k0)
    cfg = AdmissibilityConfig(mu, variant)
    ledger = ComplexityLedger(len(mesh.active_elements()))
    for _ in range(levels):
        marked = _corner_elements(mesh, v)
        refine(mesh, stack, marked, cfg)
        ledger.record(len(marked), len(mesh.active_elements()))
    rep = complexity_report(ledger)
    rep["mesh"] = mesh
    return rep
