"""Random admissible refinement runs with correctness checks, plus point-refinement overhead."""
import argparse
from pathlib import Path

from c1hier.cli_io import BUILTINS, builtin_geometry, mesh_svg
from c1hier.experiments import point_refinement, random_refinement


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--geometry", default="threepatch-ev3", choices=BUILTINS)
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--levels", type=int, default=10)
    ap.add_argument("--out", default="results/refinement")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geom = builtin_geometry(args.geometry)

    for mu in (2, 3):
        for variant in "HT":
            recs = list(random_refinement(geom, mu=mu, variant=variant, runs=args.runs, seed=mu))
            bad = [r["run"] for r in recs if not (r["P1"] and r["full_rank"] and r["admissibility"] <= mu)]
            print(f"mu={mu} {variant}: {len(recs)} runs, failing runs {bad or 'none'}")
            rep = point_refinement(geom, mu=mu, variant=variant, levels=args.levels)
            print("   overhead ratios", " ".join(f"{x:.1f}" for x in rep["ratios"]))
            mesh = rep["mesh"]
            mesh_svg(geom, [el + (mesh.nel(el[0]),) for el in mesh.active_elements()],
                     out / f"point_mu{mu}_{variant}.svg")


if __name__ == "__main__":
    main()
