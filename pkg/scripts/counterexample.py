"""Local linear dependence of the C1 basis near the valence-3 vertex of the three-patch domain."""
from c1hier.c1basis import C1Space
from c1hier.cli_io import builtin_geometry
from c1hier.verify import RankProbe, collocation_rank, extraction_evaluator


def main():
    sp = C1Space(builtin_geometry("threepatch-ev3"), 3, 1, 5)
    h = 1 / sp.nel
    print(f"dimension {sp.dim}, {sp.nel}x{sp.nel} elements per patch")
    for a, b in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]:
        keys = sp.functions_on(0, a, b)
        evals = [extraction_evaluator(sp.coeffs(k), sp.space.knots, sp.p) for k in keys]
        el = [(0, (a * h, (a + 1) * h), (b * h, (b + 1) * h))]
        vert = [e for e, k in zip(evals, keys) if k[0] == "V"]
        rank = collocation_rank(evals, el, RankProbe(6))
        vrank = collocation_rank(vert, el, RankProbe(6)) if vert else 0
        print(f"element ({a},{b}) of patch 0: {len(keys):2d} functions, rank {rank:2d}; "
              f"{len(vert)} vertex functions of rank {vrank}")


if __name__ == "__main__":
    main()
