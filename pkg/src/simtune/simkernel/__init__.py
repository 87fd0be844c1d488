"""Desk-scale two-phase (oil-water) finite-volume reservoir simulator."""
from .assemble import DARCY, Discretization, SimState, assemble_system, harmonic_transmissibility
from .cases import darcy_pair_case, lognormal_field, peaceman_index, quarter_five_spot, reference_case
from .linsolve import LinearSolution, StructurallySingularError, linear_solve, ordering_permutation
from .model import (
    SIMULATOR_ID,
    FluidModel,
    GridModel,
    InvalidCaseError,
    NumericalControls,
    RunCounters,
    SimulationCase,
    SimulationResult,
    WellControl,
    WellSpec,
    table_from_csv,
    table_to_csv,
)
from .simulator import (
    ConvergenceFailure,
    compute_mbe,
    make_context,
    run_simulation,
    select_timestep,
    solve_timestep,
)

__all__ = [
    "DARCY",
    "SIMULATOR_ID",
    "ConvergenceFailure",
    "Discretization",
    "FluidModel",
    "GridModel",
    "InvalidCaseError",
    "LinearSolution",
    "NumericalControls",
    "RunCounters",
    "SimState",
    "SimulationCase",
    "SimulationResult",
    "StructurallySingularError",
    "WellControl",
    "WellSpec",
    "assemble_system",
    "compute_mbe",
    "darcy_pair_case",
    "harmonic_transmissibility",
    "linear_solve",
    "lognormal_field",
    "make_context",
    "ordering_permutation",
    "peaceman_index",
    "quarter_five_spot",
    "reference_case",
    "run_simulation",
    "select_timestep",
    "solve_timestep",
    "table_from_csv",
    "table_to_csv",
]
