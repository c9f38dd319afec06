"""Adaptive and uniform biharmonic runs on the L-shaped domain with the corner singularity."""
import argparse
from pathlib import Path

from c1hier.cli_io import builtin_geometry, convergence_svg, mesh_svg, write_ledger
from c1hier.config import RunConfig
from c1hier.solver import adaptive_loop, biharmonic_lshape, loglog_slope, uniform_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/biharmonic")
    ap.add_argument("--max-ndof", type=int, default=12_000)
    ap.add_argument("--max-levels", type=int, default=12)
    ap.add_argument("--uniform-levels", type=int, default=4)
    ap.add_argument("--homogeneous", action="store_true", help="use the variant with zero boundary data")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    geom = builtin_geometry("lshape-8p")
    prob = biharmonic_lshape(homogeneous=args.homogeneous)
    cfg = RunConfig(problem="biharmonic", mu=3, theta=0.8, max_levels=args.max_levels, max_ndof=args.max_ndof)
    res = adaptive_loop(geom, prob, cfg, log=lambda r: print(r["ndof"], r["levels"], f"{r['err']:.3e}"))
    rows = res["rows"]
    write_ledger(rows, out / "adaptive.csv", "err_h2")
    mesh = res["mesh"]
    mesh_svg(geom, [el + (mesh.nel(el[0]),) for el in mesh.active_elements()], out / "mesh.svg")
    uni = uniform_loop(geom, prob, cfg, args.uniform_levels)["rows"]
    write_ledger(uni, out / "uniform.csv", "err_h2")
    tail = rows[-5:]
    print(f"adaptive slope {loglog_slope([r['ndof'] for r in tail], [r['err'] for r in tail]):.3f}")
    convergence_svg({"adaptive": ([r["ndof"] for r in rows], [r["err"] for r in rows]),
                     "uniform": ([r["ndof"] for r in uni], [r["err"] for r in uni])},
                    out / "convergence.svg", "H2 seminorm error")


if __name__ == "__main__":
    main()
