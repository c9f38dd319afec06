"""Poisson problem with a singular ridge along y = x on the six-patch diagonal square."""
import argparse
from pathlib import Path

from c1hier.cli_io import builtin_geometry, convergence_svg, mesh_svg, write_ledger
from c1hier.config import RunConfig
from c1hier.solver import adaptive_loop, loglog_slope, poisson_ridge, uniform_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/ridge")
    ap.add_argument("--p", type=int, default=3)
    ap.add_argument("--max-ndof", type=int, default=20_000)
    ap.add_argument("--uniform-levels", type=int, default=3)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    geom = builtin_geometry("diagonal-6p")
    prob = poisson_ridge()
    # 6 x 6 starting elements per patch, truncated basis, class 3
    cfg = RunConfig(geometry="diagonal-6p", example="ridge", p=args.p, k0=5, mode="truncated", mu=3,
                    theta=0.8, max_ndof=args.max_ndof)
    res = adaptive_loop(geom, prob, cfg, log=lambda r: print(r["ndof"], r["levels"], f"{r['err']:.3e}"))
    rows = res["rows"]
    write_ledger(rows, out / "adaptive.csv")
    mesh = res["mesh"]
    mesh_svg(geom, [el + (mesh.nel(el[0]),) for el in mesh.active_elements()], out / "mesh.svg")
    uni = uniform_loop(geom, prob, cfg, args.uniform_levels)["rows"]
    write_ledger(uni, out / "uniform.csv")
    tail = rows[-5:]
    print(f"adaptive slope {loglog_slope([r['ndof'] for r in tail], [r['err'] for r in tail]):.3f}, "
          f"expected about {-min(args.p / 2, 11 / 6):.3f}")
    convergence_svg({"adaptive": ([r["ndof"] for r in rows], [r["err"] for r in rows]),
                     "uniform": ([r["ndof"] for r in uni], [r["err"] for r in uni])},
                    out / "convergence.svg", "H1 error")


if __name__ == "__main__":
    main()
