"""Run configuration for the adaptive solver."""
from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass
class RunConfig:
    """Settings of one adaptive (or uniform) run.

    ``variant`` defaults to ``"T"`` for the truncated basis and ``"H"`` otherwise;
    ``mu`` defaults to 2 for the Poisson problem and 3 for the biharmonic one.
    """

    geometry: str = "threepatch-ev3"
    problem: str = "poisson"
    example: str | None = None
    p: int = 3
    r: int | None = None
    k0: int = 3
    mode: str = "plain"
    mu: int | None = None
    variant: str | None = None
    theta: float = 0.8
    max_levels: int = 12
    max_ndof: int = 80_000
    max_iter: int = 60
    uniform: bool = False
    bc_weighting: str = "scaled"
    ledger: str | None = None
    mesh_svg: str | None = None
    plot_svg: str | None = None

    def __post_init__(self):
        if self.r is None:
            self.r = self.p - 2
        if self.mu is None:
            self.mu = 2 if self.problem == "poisson" else 3
        if self.variant is None:
            self.variant = "T" if self.mode == "truncated" else "H"
        if self.example is None:
            self.example = "singular" if self.problem == "poisson" else "lshape"
        self.validate()

    def validate(self):
        if self.problem not in ("poisson", "biharmonic"):
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.p < 3:
            raise ValueError("degree must be at least 3")
        if not 1 <= self.r <= self.p - 2:
            raise ValueError("regularity must satisfy 1 <= r <= p-2")
        if self.k0 < 3:
            raise ValueError("k0 must be at least 3 (4x4 elements per patch)")
        if self.mode not in ("plain", "truncated"):
            raise ValueError("mode must be 'plain' or 'truncated'")
        if self.variant not in ("H", "T"):
            raise ValueError("variant must be 'H' or 'T'")
        if self.mu < 1:
            raise ValueError("mu must be at least 1")
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.bc_weighting not in ("equal", "scaled"):
            raise ValueError("bc_weighting must be 'equal' or 'scaled'")
        if self.max_levels < 1 or self.max_ndof < 1 or self.max_iter < 1:
            raise ValueError("stop criteria must be positive")

    def as_dict(self) -> dict:
        return asdict(self)
