"""Hierarchical C1 isogeometric splines on analysis-suitable G1 multi-patch domains."""
from .adaptivity import AdmissibilityConfig, dist, refine
from .c1basis import C1Space
from .cli_io import builtin_geometry, load_geometry, save_geometry
from .config import RunConfig
from .hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack, check_P1
from .mptopology import MultiPatchGeometry, Patch
from .solver import adaptive_loop, make_problem, uniform_loop

__all__ = [
    "AdmissibilityConfig", "C1Space", "HierarchicalMesh", "HierarchicalSpace", "LevelStack",
    "MultiPatchGeometry", "Patch", "RunConfig", "adaptive_loop", "builtin_geometry", "check_P1",
    "dist", "load_geometry", "make_problem", "refine", "save_geometry", "uniform_loop",
]
__version__ = "0.1.0"
