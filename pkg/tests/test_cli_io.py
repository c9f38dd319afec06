import csv
import json
import re

import numpy as np
import pytest
from click.testing import CliRunner

from c1hier.c1basis import C1Space
from c1hier.cli_io import (BUILTINS, _cli, basis_suite, builtin_geometry, convergence_svg, extraction_to_dict,
                           mesh_svg, read_ledger, save_geometry, write_ledger)
from c1hier.config import RunConfig
from c1hier.mptopology import GeometryError, asg1_check


@pytest.fixture(scope="module")
def cli():
    return _cli()


def run(cli, *args):
    return CliRunner().invoke(cli, [str(a) for a in args])


def test_solve_ledger(cli, tmp_path):
    out = tmp_path / "run.csv"
    res = run(cli, "solve", "--geometry", "threepatch-ev3", "--problem", "poisson", "--p", 3, "--mu", 2,
              "--theta", 0.8, "--max-levels", 8, "--max-ndof", 700, "--ledger", out,
              "--mesh-svg", tmp_path / "mesh.svg", "--plot-svg", tmp_path / "conv.svg")
    assert res.exit_code == 0, res.output
    with open(out) as fh:
        header = next(csv.reader(fh))
    assert header == ["iter", "ndof", "levels", "err_h1", "estimator", "seconds"]
    rows = read_ledger(out)
    nd = [r["ndof"] for r in rows]
    assert len(nd) >= 3 and all(a < b for a, b in zip(nd, nd[1:]))
    assert (tmp_path / "mesh.svg").read_text().count("<polygon") > 48
    assert "<polyline" in (tmp_path / "conv.svg").read_text()


def test_solve_biharmonic_uniform(cli, tmp_path):
    out = tmp_path / "b.csv"
    res = run(cli, "solve", "--problem", "biharmonic", "--geometry", "lshape-8p", "--uniform", 2, "--ledger", out)
    assert res.exit_code == 0, res.output
    assert "err_h2" in out.read_text().splitlines()[0]
    assert [r["levels"] for r in read_ledger(out)] == [1, 2]


def test_solve_bad_config(cli):
    res = run(cli, "solve", "--theta", 1.5)
    assert res.exit_code == 1
    err = json.loads(res.stderr.strip().splitlines()[-1])
    assert err["error"] == "ValueError" and "theta" in err["message"]


def test_solve_missing_geometry(cli, tmp_path):
    res = run(cli, "solve", "--geometry", tmp_path / "nope.json")
    assert res.exit_code == 1
    assert json.loads(res.stderr.strip().splitlines()[-1])["error"] == "FileNotFoundError"


def test_solve_geometry_file(cli, tmp_path, square2):
    path = tmp_path / "g.json"
    save_geometry(square2, path)
    res = run(cli, "solve", "--geometry", path, "--example", "bilinear", "--uniform", 1)
    assert res.exit_code == 0, res.output
    err = float(res.output.strip().splitlines()[-1].split(",")[3])
    assert err < 1e-9


def test_verify_basis_counterexample(cli):
    res = run(cli, "verify-basis", "--geometry", "threepatch-ev3", "--p", 3, "--k", 5)
    assert res.exit_code == 0, res.output
    assert "FAIL" not in res.output
    m = re.search(r"patch 0 element \(0, 1\): (\d+) functions, rank (\d+), vertex functions 6 of rank (\d+)",
                  res.output)
    assert m and int(m[1]) == 18 and int(m[2]) <= 16 and int(m[3]) < 6


@pytest.mark.parametrize("name", BUILTINS)
def test_basis_suite_passes(name, geometries):
    rows = basis_suite(geometries[name], 3, 1, 3)
    assert all(ok for _, ok, _ in rows)


def test_refine_demo(cli):
    res = run(cli, "refine-demo", "--geometry", "square-2p", "--runs", 2, "--steps", 2, "--levels", 3)
    assert res.exit_code == 0, res.output
    assert res.output.count("PASS") == 2
    assert len(res.output.splitlines()[-1].split()) == 2 + 3


def test_export_extraction(cli, tmp_path, square2):
    out = tmp_path / "ext.json"
    res = run(cli, "export-extraction", "--geometry", "square-2p", "--k", 3, "--out", out)
    assert res.exit_code == 0, res.output
    data = json.loads(out.read_text())
    sp = C1Space(square2, 3, 1, 3)
    assert data["format_version"] == 1 and len(data["functions"]) == sp.dim
    f = data["functions"][0]
    blk = sp.coeffs(tuple(f["key"]))[f["blocks"][0]["patch"]]
    assert np.array_equal(np.array(f["blocks"][0]["c"]), blk.c)
    assert json.dumps(extraction_to_dict(sp), sort_keys=True) == out.read_text()


def test_ledger_round_trip(tmp_path):
    rows = [{"iter": i, "ndof": 10 * (i + 1), "levels": i + 1, "err": 0.1 / 3 ** i, "estimator": 1 / 7 ** i,
             "seconds": 0.5 * i} for i in range(4)]
    path = tmp_path / "l.csv"
    write_ledger(rows, path, "err_h2")
    assert read_ledger(path) == rows


def test_svg_writers(tmp_path, square2):
    mesh_svg(square2, [(0, 0, 0, 0, 4), (1, 1, 3, 3, 8)], tmp_path / "m.svg")
    txt = (tmp_path / "m.svg").read_text()
    assert txt.startswith("<svg") and txt.count("<polygon") == 2
    convergence_svg({"a": ([10, 100], [1, 0.1]), "b": ([10, 100], [2, 0.5])}, tmp_path / "c.svg")
    assert (tmp_path / "c.svg").read_text().count("<polyline") == 2


@pytest.mark.parametrize("bad", [dict(problem="heat"), dict(p=2), dict(r=2), dict(k0=2), dict(mode="x"),
                                 dict(variant="Z"), dict(mu=0), dict(theta=0.0), dict(bc_weighting="x"),
                                 dict(max_ndof=0)])
def test_run_config_rejects(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)


def test_run_config_defaults():
    c = RunConfig()
    assert (c.r, c.mu, c.variant, c.example) == (1, 2, "H", "singular")
    b = RunConfig(problem="biharmonic", mode="truncated")
    assert (b.mu, b.variant, b.example) == (3, "T", "lshape")
    assert RunConfig(**c.as_dict()) == c


@pytest.mark.parametrize("valence", [3, 5, 8])
def test_star_geometry(valence):
    g = builtin_geometry(f"star-{valence}")
    inner = [v for v in g.vertices if v.kind == "inner"]
    assert len(inner) == 1 and inner[0].valence == valence and np.allclose(inner[0].point, 0)
    assert all(r["ok"] for r in asg1_check(g))


def test_star_geometry_limits():
    for name in ("star-2", "star-9", "star-x"):
        with pytest.raises(GeometryError):
            builtin_geometry(name)


def test_diagonal_geometry():
    g = builtin_geometry("diagonal-6p")
    assert g.npatch == 6 and all(r["ok"] for r in asg1_check(g))
    s = np.linspace(0, 1, 9)
    on_diag = 0
    for e in g.edges:
        if e.kind == "inner":
            i, code = e.sides[0]
            pts = g.local_patch(i, code).evaluate(np.stack([0 * s, s], 1), 0)[0]
            on_diag += bool(np.allclose(pts[:, 0], pts[:, 1]))
    assert on_diag == 2
