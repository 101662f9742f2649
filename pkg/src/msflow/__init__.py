"""Two-scale multiscale FEM solver for nonlinear compressible Darcy flow."""

from .coarse import CoarseResult, project_system, solve_gmsfem
from .fem import (
    NewtonConfig,
    assemble_weighted_mass,
    assemble_weighted_stiffness,
    linear_solve,
    newton_jacobian,
    newton_residual,
    solve_fine,
)
from .grid import build_two_scale_mesh, neighborhood_restriction
from .harness import (
    ExperimentConfig,
    relative_h1_error,
    relative_l2_error,
    run_experiment,
    sweep,
)
from .model import (
    FluidProps,
    PermeabilityField,
    TimeGrid,
    density,
    density_derivative,
    generate_channel_field,
    load_field_from_file,
    make_problem,
)
from .offline import build_offline_space
from .online import UpdateSchedule, enrich_projection

__all__ = [
    "CoarseResult",
    "ExperimentConfig",
    "FluidProps",
    "NewtonConfig",
    "PermeabilityField",
    "TimeGrid",
    "UpdateSchedule",
    "assemble_weighted_mass",
    "assemble_weighted_stiffness",
    "build_offline_space",
    "build_two_scale_mesh",
    "density",
    "density_derivative",
    "enrich_projection",
    "generate_channel_field",
    "linear_solve",
    "load_field_from_file",
    "make_problem",
    "neighborhood_restriction",
    "newton_jacobian",
    "newton_residual",
    "project_system",
    "relative_h1_error",
    "relative_l2_error",
    "run_experiment",
    "solve_fine",
    "solve_gmsfem",
    "sweep",
]

__version__ = "0.1.0"
