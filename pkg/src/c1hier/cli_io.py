"""Geometry files, built-in geometries, CSV ledgers and SVG output."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import click
import numpy as np

from . import solver as S
from .c1basis import J_CHI, C1Space, physical_derivatives
from .config import RunConfig
from .experiments import point_refinement, random_refinement
from .hierarchy import numerical_rank
from .mptopology import GeometryError, MultiPatchGeometry, OrientationCode, Patch

FORMAT_VERSION = 1
BUILTINS = ("threepatch-ev3", "lshape-8p", "square-2p", "square-1p")


def _bilinear(p00, p10, p01, p11) -> Patch:
    net = np.array([[p00, p01], [p10, p11]], dtype=float)
    return Patch(net, degree=1, k=0)


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def threepatch_patches():
    r3 = math.sqrt(3.0)
    a = np.array([2 * (r3 + 1), -2 * (r3 - 1)])
    b = np.array([r3 - 3, 3 * r3 + 1])
    # the far corner keeps a + b; the second edge is a rotated copy of the first
    # so that the three patches close around the origin
    R = _rot(2 * math.pi / 3)
    base = [np.zeros(2), a, R @ a, a + b]
    patches = []
    for m in range(3):
        Q = np.linalg.matrix_power(R, m)
        p00, p10, p01, p11 = (Q @ x for x in base)
        patches.append(_bilinear(p00, p10, p01, p11))
    return patches


def lshape_patches():
    # L = (-1,1)^2 minus [0,1]x[-1,0]; re-entrant corner at the origin
    O = (0.0, 0.0)
    m_ab = (0.05, 0.5)      # inner vertex between the right arm and the corner block
    m_bc = (-0.5, -0.05)    # inner vertex between the corner block and the lower arm
    c = (-0.45, 0.55)       # centre of the corner block
    quads = [
        (O, (1.0, 0.0), m_ab, (1.0, 0.5)),
        (m_ab, (1.0, 0.5), (0.0, 1.0), (1.0, 1.0)),
        (m_bc, O, c, m_ab),
        (c, m_ab, (-0.5, 1.0), (0.0, 1.0)),
        ((-1.0, 0.5), c, (-1.0, 1.0), (-0.5, 1.0)),
        ((-1.0, 0.0), m_bc, (-1.0, 0.5), c),
        ((-0.5, -1.0), (0.0, -1.0), m_bc, O),
        ((-1.0, -1.0), (-0.5, -1.0), (-1.0, 0.0), m_bc),
    ]
    return [_bilinear(*q) for q in quads]


def square_patches(npatch: int):
    if npatch == 1:
        return [_bilinear((0, 0), (1, 0), (0, 1), (1, 1))]
    left = _bilinear((0, 0), (0.5, 0), (0, 1), (0.5, 1))
    # second patch with swapped parameter directions
    right = _bilinear((0.5, 0), (0.5, 1), (1, 0), (1, 1))
    return [left, right]


def star_patches(valence: int):
    """``valence`` convex bilinear quadrilaterals around an inner vertex at the origin."""
    if not 3 <= valence <= 8:
        raise GeometryError("star valence must lie between 3 and 8")
    patches = []
    for m in range(valence):
        e0 = np.array([math.cos(2 * math.pi * m / valence), math.sin(2 * math.pi * m / valence)])
        e1 = _rot(2 * math.pi / valence) @ e0
        mid = e0 + e1
        far = 1.1 * mid / np.linalg.norm(mid) + 0.2 * mid
        patches.append(_bilinear((0.0, 0.0), e0, e1, far))
    return patches


def diagonal_patches():
    """Six quadrilaterals on ``(-1, 1)^2`` whose interfaces contain the diagonal ``y = x``."""
    upper = [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
    quads = []
    for mirrored, tri in ((False, upper), (True, [(y, x) for x, y in upper])):
        a, b, c = (np.array(t) for t in tri)
        g = (a + b + c) / 3
        mab, mbc, mca = (a + b) / 2, (b + c) / 2, (c + a) / 2
        for q in [(a, mca, mab, g), (mca, c, g, mbc), (mab, g, b, mbc)]:
            # mirroring flips the orientation; transposing the parameters restores it
            quads.append((q[0], q[2], q[1], q[3]) if mirrored else q)
    return [_bilinear(*q) for q in quads]


EXTRA = ("diagonal-6p",)


def is_builtin(name: str) -> bool:
    return name in BUILTINS or name in EXTRA or name.startswith("star-")


def builtin_geometry(name: str) -> MultiPatchGeometry:
    """Built-in domains.

    Besides ``BUILTINS``: ``star-N`` is a fan of N patches around one inner
    vertex and ``diagonal-6p`` a six-patch square with interfaces along ``y = x``.
    """
    if name.startswith("star-") and name[5:].isdigit():
        patches = star_patches(int(name[5:]))
    elif name == "diagonal-6p":
        patches = diagonal_patches()
    elif name == "threepatch-ev3":
        patches = threepatch_patches()
    elif name == "lshape-8p":
        patches = lshape_patches()
    elif name == "square-2p":
        patches = square_patches(2)
    elif name == "square-1p":
        patches = square_patches(1)
    else:
        raise GeometryError(f"unknown built-in geometry {name!r}; choose from {BUILTINS}")
    return MultiPatchGeometry(patches, name=name)


def _code_dict(c: OrientationCode):
    return {"swap": c.swap, "rev_u": c.rev_u, "rev_v": c.rev_v}


def geometry_to_dict(geom: MultiPatchGeometry) -> dict:
    P0 = geom.patches[0]
    return {
        "format_version": FORMAT_VERSION,
        "name": geom.name,
        "degree": P0.degree,
        "k": P0.k,
        "patches": [P.net.reshape(-1, 2).tolist() for P in geom.patches],
        "interfaces": [
            {"id": e.id, "sides": [{"patch": i, **_code_dict(c)} for i, c in e.sides]}
            for e in geom.edges if e.kind == "inner"],
        "boundary": [
            {"id": e.id, "patch": e.i0, **_code_dict(e.sides[0][1])}
            for e in geom.edges if e.kind == "boundary"],
        "vertices": [
            {"id": v.id, "kind": v.kind, "point": v.point.tolist(),
             "fan": [{"patch": i, **_code_dict(c)} for i, c in v.fan],
             "edges": list(v.edges), "edge_at_start": list(v.at_start)}
            for v in geom.vertices],
    }


def geometry_from_dict(data: dict) -> MultiPatchGeometry:
    if data.get("format_version") != FORMAT_VERSION:
        raise GeometryError(f"unsupported geometry format_version {data.get('format_version')}")
    deg, k = int(data["degree"]), int(data["k"])
    m = deg + 1 + k
    patches = [Patch(np.asarray(pts, dtype=float).reshape(m, m, 2), deg, k) for pts in data["patches"]]
    geom = MultiPatchGeometry(patches, name=data.get("name", ""))
    if "vertices" in data:
        stored = sorted(len(v["fan"]) for v in data["vertices"])
        if stored != sorted(v.valence for v in geom.vertices):
            raise GeometryError("stored vertex topology disagrees with the control data")
    if "interfaces" in data and len(data["interfaces"]) != sum(e.kind == "inner" for e in geom.edges):
        raise GeometryError("stored interfaces disagree with the control data")
    return geom


def dumps_geometry(geom: MultiPatchGeometry) -> str:
    return json.dumps(geometry_to_dict(geom), indent=1, sort_keys=True)


def save_geometry(geom: MultiPatchGeometry, path):
    Path(path).write_text(dumps_geometry(geom))


def load_geometry(source) -> MultiPatchGeometry:
    if is_builtin(str(source)):
        return builtin_geometry(str(source))
    return geometry_from_dict(json.loads(Path(source).read_text()))


def write_ledger(rows, path, err_name: str = "err_h1"):
    fields = ["iter", "ndof", "levels", err_name, "estimator", "seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([r["iter"], r["ndof"], r["levels"], repr(float(r["err"])),
                        repr(float(r["estimator"])), f"{r['seconds']:.4f}"])


def read_ledger(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        err_key = "err_h1" if "err_h1" in r else "err_h2"
        out.append({"iter": int(r["iter"]), "ndof": int(r["ndof"]), "levels": int(r["levels"]),
                    "err": float(r[err_key]), "estimator": float(r["estimator"]),
                    "seconds": float(r["seconds"])})
    return out


_PALETTE = ["#f7fbff", "#deebf7", "#c6dbef", "#9ecae1", "#6baed6", "#4292c6",
            "#2171b5", "#08519c", "#08306b", "#041f4a", "#02112b", "#000814"]


def mesh_svg(geom: MultiPatchGeometry, elements, path, size: int = 600):
    """Write the active elements ``(level, patch, e1, e2, nel)`` coloured by level."""
    polys = []
    for level, patch, e1, e2, nel in elements:
        s = np.linspace(0, 1, 5)
        a1, b1 = e1 / nel, (e1 + 1) / nel
        a2, b2 = e2 / nel, (e2 + 1) / nel
        bd = np.concatenate([
            np.stack([a1 + (b1 - a1) * s, np.full(5, a2)], -1),
            np.stack([np.full(5, b1), a2 + (b2 - a2) * s], -1),
            np.stack([b1 - (b1 - a1) * s, np.full(5, b2)], -1),
            np.stack([np.full(5, a1), b2 - (b2 - a2) * s], -1)])
        polys.append((level, geom.patches[patch].evaluate(bd, 0)[0]))
    allp = np.concatenate([p for _, p in polys])
    lo, hi = allp.min(0), allp.max(0)
    scale = (size - 20) / max(hi - lo)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for level, p in polys:
        q = (p - lo) * scale + 10
        pts = " ".join(f"{x:.2f},{size - y:.2f}" for x, y in q)
        col = _PALETTE[min(level, len(_PALETTE) - 1)]
        out.append(f'<polygon points="{pts}" fill="{col}" stroke="#333" stroke-width="0.3"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))


def convergence_svg(series: dict, path, ylabel: str = "error", size=(600, 420)):
    """Log-log plot of ``{label: (ndof, err)}``."""
    W, H = size
    xs = np.concatenate([np.log10(np.asarray(v[0], float)) for v in series.values()])
    ys = np.concatenate([np.log10(np.asarray(v[1], float)) for v in series.values()])
    x0, x1 = xs.min(), xs.max() + 1e-12
    y0, y1 = ys.min(), ys.max() + 1e-12

    def tr(x, y):
        return 60 + (x - x0) / (x1 - x0) * (W - 80), H - 40 - (y - y0) / (y1 - y0) * (H - 60)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<text x="5" y="15" font-size="12">log10 {ylabel} vs log10 NDOF</text>']
    for n, (label, (nd, er)) in enumerate(series.items()):
        pts = [tr(math.log10(a), math.log10(b)) for a, b in zip(nd, er)]
        c = colors[n % len(colors)]
        out.append('<polyline fill="none" stroke="%s" points="%s"/>'
                   % (c, " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)))
        out.append(f'<text x="{W - 150}" y="{30 + 15 * n}" fill="{c}" font-size="12">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out))


# ---------------------------------------------------------------------------
# command line


def _physical(geom, patch, xi, vals):
    _, jac, hess = geom.patches[patch].evaluate(xi, 2)
    return physical_derivatives(jac, hess, vals)


def basis_suite(geom: MultiPatchGeometry, p: int = 3, r: int | None = None, k: int = 5) -> list:
    """Structure, smoothness and local-dependence checks of the C1 basis.

    Returns rows ``(name, ok, detail)``; a locally dependent element is reported
    as information, not as a failure.
    """
    sp = C1Space(geom, p, r, k)
    rows = []
    formula = (geom.npatch * (sp.n - 4) ** 2 + len(geom.edges) * ((sp.n0 - 6) + (sp.n1 - 4))
               + 6 * len(geom.vertices))
    rows.append(("dimension", formula == sp.dim == len(sp.keys()), f"{sp.dim} functions, formula {formula}"))
    counts = {len(sp.vertex_keys(v.id)) for v in geom.vertices}
    rows.append(("vertex functions", counts == {6}, f"per vertex {sorted(counts)}"))

    s = np.linspace(0.05, 0.95, 7)
    vjump = gjump = 0.0
    for e in geom.edges:
        if e.kind != "inner":
            continue
        (i0, c0), (i1, c1) = e.sides
        x0 = np.array([c0.to_patch(np.array([0.0, t])) for t in s])
        x1 = np.array([c1.to_patch(np.array([t, 0.0])) for t in s])
        for key in sp.keys():
            if key[0] == "I":
                continue
            u0, g0, _ = _physical(geom, i0, x0, sp.eval_param(key, i0, x0, 2))
            u1, g1, _ = _physical(geom, i1, x1, sp.eval_param(key, i1, x1, 2))
            vjump = max(vjump, float(np.abs(u0 - u1).max()))
            gjump = max(gjump, float(np.abs(g0 - g1).max()))
    rows.append(("value continuity", vjump < 1e-9, f"max jump {vjump:.2e}"))
    rows.append(("gradient continuity", gjump < 1e-6, f"max jump {gjump:.2e}"))

    worst = 0.0
    for v in geom.vertices:
        i, code = v.fan[0]
        x = np.array([code.to_patch(np.zeros(2))])
        sig = sp.sigma(v.id)
        for j, key in enumerate(sp.vertex_keys(v.id)):
            u, g, H = _physical(geom, i, x, sp.eval_param(key, i, x, 2))
            got = np.array([u[0], g[0, 0], H[0, 0, 0], g[0, 1], H[0, 0, 1], H[0, 1, 1]])
            want = np.zeros(6)
            want[j] = sig ** sum(J_CHI[j])
            worst = max(worst, float(np.abs(got - want).max() / max(1.0, abs(want[j]))))
    rows.append(("C2 interpolation", worst < 1e-6, f"max relative error {worst:.2e}"))

    # local linear dependence on vertex-adjacent elements
    t = (np.arange(p + 2) + 0.5) / (p + 2)
    found = []
    for v in geom.vertices:
        for i, code in v.fan:
            for a in range(min(2, sp.nel)):
                for b in range(min(2, sp.nel)):
                    el = tuple(code.index_to_patch(a, b, sp.nel))
                    keys = sp.functions_on(i, *el)
                    X = np.array([((el[0] + x) / sp.nel, (el[1] + y) / sp.nel) for x in t for y in t])
                    M = np.stack([sp.eval_param(kk, i, X, 0)[:, 0] for kk in keys], 1)
                    rk = numerical_rank(M)
                    if rk < len(keys):
                        vk = [kk for kk in keys if kk[0] == "V"]
                        vr = numerical_rank(M[:, [keys.index(kk) for kk in vk]]) if vk else 0
                        found.append((i, el, len(keys), rk, len(vk), vr))
    found = sorted(set(found))
    detail = "; ".join(f"patch {i} element {el}: {n} functions, rank {rk}, vertex functions {nv} of rank {vr}"
                       for i, el, n, rk, nv, vr in found[:6]) or "none"
    rows.append(("locally dependent elements", True, f"{len(found)} found: {detail}"))
    return rows


def _fail(exc: Exception):
    click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
    raise SystemExit(1)


def _cli():

    @click.group()
    def main():
        """Hierarchical C1 isogeometric splines on multi-patch domains."""

    @main.command()
    @click.option("--geometry", default="threepatch-ev3", show_default=True, help="built-in name or JSON file")
    @click.option("--problem", type=click.Choice(["poisson", "biharmonic"]), default="poisson", show_default=True)
    @click.option("--example", default=None, help="singular|bilinear|smooth|ridge (poisson), lshape|biquadratic (biharmonic)")
    @click.option("--p", "p", type=int, default=3, show_default=True)
    @click.option("--r", "r", type=int, default=None, help="regularity, default p-2")
    @click.option("--k", "k", type=int, default=3, show_default=True, help="initial interior knots per direction")
    @click.option("--mode", type=click.Choice(["plain", "truncated"]), default="plain", show_default=True)
    @click.option("--mu", type=int, default=None, help="admissibility class, default 2 (poisson) or 3 (biharmonic)")
    @click.option("--variant", type=click.Choice(["H", "T"]), default=None)
    @click.option("--theta", type=float, default=0.8, show_default=True)
    @click.option("--max-levels", type=int, default=12, show_default=True)
    @click.option("--max-ndof", type=int, default=80_000, show_default=True)
    @click.option("--uniform", type=int, default=0, help="run this many uniform levels instead")
    @click.option("--bc-weighting", type=click.Choice(["equal", "scaled"]), default="scaled", show_default=True)
    @click.option("--ledger", type=click.Path(), default=None, help="CSV output")
    @click.option("--mesh-svg", "mesh_out", type=click.Path(), default=None)
    @click.option("--plot-svg", "plot_out", type=click.Path(), default=None)
    def solve(geometry, problem, example, p, r, k, mode, mu, variant, theta, max_levels, max_ndof,
              uniform, bc_weighting, ledger, mesh_out, plot_out):
        """Adaptive (or uniform) solve with ledger output."""
        try:
            cfg = RunConfig(geometry=geometry, problem=problem, example=example, p=p, r=r, k0=k,
                            mode=mode, mu=mu, variant=variant, theta=theta, max_levels=max_levels,
                            max_ndof=max_ndof, uniform=bool(uniform), bc_weighting=bc_weighting,
                            ledger=ledger, mesh_svg=mesh_out, plot_svg=plot_out)
            geom = load_geometry(geometry)
            prob = S.make_problem(problem, cfg.example, geom)
            err_name = "err_h1" if problem == "poisson" else "err_h2"
            click.echo(f"iter,ndof,levels,{err_name},estimator,seconds")

            def log(row):
                click.echo(f"{row['iter']},{row['ndof']},{row['levels']},{row['err']:.6e},"
                           f"{row['estimator']:.6e},{row['seconds']:.2f}")
            if uniform:
                res = S.uniform_loop(geom, prob, cfg, uniform, log=log)
            else:
                res = S.adaptive_loop(geom, prob, cfg, log=log)
            rows = res["rows"]
            if ledger:
                write_ledger(rows, ledger, err_name)
            if mesh_out and "mesh" in res:
                mesh = res["mesh"]
                mesh_svg(geom, [el + (mesh.nel(el[0]),) for el in mesh.active_elements()], mesh_out)
            if plot_out:
                convergence_svg({"uniform" if uniform else "adaptive":
                                 ([r_["ndof"] for r_ in rows], [r_["err"] for r_ in rows])},
                                plot_out, err_name)
        except Exception as exc:  # noqa: BLE001 - reported on stderr
            _fail(exc)

    @main.command("verify-basis")
    @click.option("--geometry", default="threepatch-ev3", show_default=True)
    @click.option("--p", "p", type=int, default=3, show_default=True)
    @click.option("--r", "r", type=int, default=None)
    @click.option("--k", "k", type=int, default=5, show_default=True)
    def verify_basis(geometry, p, r, k):
        """Check structure and smoothness of the C1 basis and report local dependence."""
        try:
            rows = basis_suite(load_geometry(geometry), p, r, k)
        except Exception as exc:  # noqa: BLE001
            _fail(exc)
        width = max(len(n) for n, _, _ in rows)
        for name, ok, detail in rows:
            click.echo(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
        if not all(ok for _, ok, _ in rows):
            _fail(RuntimeError("basis checks failed"))

    @main.command("refine-demo")
    @click.option("--geometry", default="threepatch-ev3", show_default=True)
    @click.option("--p", "p", type=int, default=3, show_default=True)
    @click.option("--k", "k", type=int, default=3, show_default=True)
    @click.option("--mu", type=int, default=2, show_default=True)
    @click.option("--variant", type=click.Choice(["H", "T"]), default="T", show_default=True)
    @click.option("--runs", type=int, default=5, show_default=True)
    @click.option("--steps", type=int, default=3, show_default=True)
    @click.option("--marks", type=int, default=2, show_default=True)
    @click.option("--levels", type=int, default=6, show_default=True, help="depth of the point-refinement sweep")
    @click.option("--seed", type=int, default=0, show_default=True)
    def refine_demo(geometry, p, k, mu, variant, runs, steps, marks, levels, seed):
        """Random marking runs with correctness checks and a complexity sweep."""
        try:
            geom = load_geometry(geometry)
            bad = 0
            for res in random_refinement(geom, p, k, mu, variant, runs, steps, marks, seed):
                ok = res["P1"] and res["admissibility"] <= mu and not res["audit"] and res["full_rank"]
                bad += not ok
                click.echo(f"run {res['run']}: elements {res['elements']} dofs {res['ndof']} "
                           f"P1 {res['P1']} class {res['admissibility']} full rank {res['full_rank']} "
                           f"{'PASS' if ok else 'FAIL'}")
            rep = point_refinement(geom, p, k, mu, variant, levels)
            click.echo("complexity ratios " + " ".join(f"{x:.2f}" for x in rep["ratios"]))
            if bad:
                raise RuntimeError(f"{bad} refinement runs failed")
        except Exception as exc:  # noqa: BLE001
            _fail(exc)

    @main.command("export-extraction")
    @click.option("--geometry", default="threepatch-ev3", show_default=True)
    @click.option("--p", "p", type=int, default=3, show_default=True)
    @click.option("--r", "r", type=int, default=None)
    @click.option("--k", "k", type=int, default=5, show_default=True)
    @click.option("--out", type=click.Path(), default="-", show_default=True)
    def export_extraction(geometry, p, r, k, out):
        """Dump the extraction coefficients of every basis function as JSON."""
        try:
            sp = C1Space(load_geometry(geometry), p, r, k)
            data = extraction_to_dict(sp)
            text = json.dumps(data, sort_keys=True)
            if out == "-":
                click.echo(text)
            else:
                Path(out).write_text(text)
        except Exception as exc:  # noqa: BLE001
            _fail(exc)

    return main


def extraction_to_dict(space) -> dict:
    """``{format_version, p, r, k, functions: [{key, blocks: [{patch, o1, o2, c}]}]}``."""
    funcs = []
    for key in space.keys():
        blocks = [{"patch": i, "o1": b.o1, "o2": b.o2, "c": b.c.tolist()}
                  for i, b in sorted(space.coeffs(key).items())]
        funcs.append({"key": list(key), "blocks": blocks})
    return {"format_version": FORMAT_VERSION, "p": space.p, "r": space.r, "k": space.k,
            "functions": funcs}


def main(argv=None):
    return _cli()(args=argv)
