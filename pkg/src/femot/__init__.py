"""Mixed finite element discretisation of dynamic optimal transport.

Densities are piecewise linear in time and piecewise constant in space,
momenta piecewise constant in time with values in an H(div) space (RT0,
BDM1 or tensor RT on parallelograms).  The problem is solved by a
primal-dual proximal iteration whose primal step is a constrained L2
projection computed with a factor-once saddle-point solver.
"""

from .densities import DensitySource, project_density
from .fespace import DofMap, SpaceConfig
from .mesh import (
    SpatialMesh,
    TimeGrid,
    build_structured_quadrilateral,
    build_structured_triangular,
    load_mesh,
    mesh_quality,
    save_mesh,
)
from .transport import TransportProblem, evaluate_action, pdhg_run, project_K_point, wasserstein_estimate

__all__ = [
    "DensitySource",
    "DofMap",
    "SpaceConfig",
    "SpatialMesh",
    "TimeGrid",
    "TransportProblem",
    "build_structured_quadrilateral",
    "build_structured_triangular",
    "evaluate_action",
    "load_mesh",
    "mesh_quality",
    "pdhg_run",
    "project_K_point",
    "project_density",
    "save_mesh",
    "wasserstein_estimate",
]
