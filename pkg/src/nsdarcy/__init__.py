"""Finite element solver and verification toolkit for coupled
free-flow/porous-media flow with slip interface conditions."""

from .analysis import (check_uniqueness, compensation_residual,
                       compute_inf_sup, verify_energy_estimate)
from .assembly import ModelParams
from .fem import CoupledSpace
from .mesh import (MixedMesh, build_rectangle_mesh, dump_mesh,
                   load_gmsh_subset, load_mesh, refine_uniform)
from .mms import convergence_study, get_case, representable_case, smooth_case
from .solver import (CoupledState, NonConvergence, SolverConfig,
                     solve_auxiliary, solve_coupled)

__version__ = "0.1.0"

__all__ = [
    "CoupledSpace", "CoupledState", "MixedMesh", "ModelParams",
    "NonConvergence", "SolverConfig", "build_rectangle_mesh",
    "check_uniqueness", "compensation_residual", "compute_inf_sup",
    "convergence_study", "dump_mesh", "get_case", "load_gmsh_subset",
    "load_mesh", "refine_uniform", "representable_case", "smooth_case",
    "solve_auxiliary", "solve_coupled", "verify_energy_estimate",
]
