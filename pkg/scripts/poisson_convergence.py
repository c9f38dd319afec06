"""Adaptive and uniform Poisson runs on the three-patch domain with u = |x|^(4/3).

Writes one CSV ledger per run and a log-log plot into ``--out``.
"""
import argparse
from pathlib import Path

from c1hier.cli_io import builtin_geometry, convergence_svg, write_ledger
from c1hier.config import RunConfig
from c1hier.solver import adaptive_loop, loglog_slope, poisson_singular, uniform_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/poisson")
    ap.add_argument("--max-ndof", type=int, default=40_000)
    ap.add_argument("--uniform-levels", type=int, default=4)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    geom = builtin_geometry("threepatch-ev3")
    prob = poisson_singular()
    series = {}
    for mode in ("plain", "truncated"):
        cfg = RunConfig(mode=mode, mu=2, theta=0.8, max_levels=40, max_ndof=args.max_ndof)
        rows = adaptive_loop(geom, prob, cfg, log=lambda r: print(mode, r["ndof"], f"{r['err']:.3e}"))["rows"]
        write_ledger(rows, out / f"adaptive_{mode}.csv")
        series[f"adaptive {mode}"] = ([r["ndof"] for r in rows], [r["err"] for r in rows])
        tail = rows[-5:]
        print(f"{mode}: slope over last five steps {loglog_slope([r['ndof'] for r in tail], [r['err'] for r in tail]):.3f}")
    rows = uniform_loop(geom, prob, RunConfig(), args.uniform_levels)["rows"]
    write_ledger(rows, out / "uniform.csv")
    series["uniform"] = ([r["ndof"] for r in rows], [r["err"] for r in rows])
    print(f"uniform: slope {loglog_slope(series['uniform'][0][-3:], series['uniform'][1][-3:]):.3f}")
    convergence_svg(series, out / "convergence.svg", "H1 error")


if __name__ == "__main__":
    main()
