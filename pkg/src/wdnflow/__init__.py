"""Steady-state hydraulics for water distribution networks by successive linearization."""

from importlib.metadata import PackageNotFoundError, version

from .assembly import (
    GPConstraintSet,
    LinearSystem,
    assemble,
    dump_system,
    emit_gp_monomials,
    recover_linear_rows,
    solve_linear,
)
from .errors import (
    Diverged,
    DimensionMismatch,
    InfeasibleSpec,
    NewtonStall,
    ParseError,
    SingularSystem,
    ValidationError,
    WdnError,
)
from .inp import canonicalize, load_network, parse_inp, read_inp, write_inp
from .network import Network, build_incidence, prune_closed, validate
from .oracle import compare, newton_iterate, newton_solve, nonlinear_residuals
from .solver import (
    AccelPolicy,
    HydraulicState,
    InitialFlows,
    SolverConfig,
    SolverReport,
    diagnose_initial_point,
    linear_system_at,
    run,
)

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "AccelPolicy",
    "DimensionMismatch",
    "Diverged",
    "GPConstraintSet",
    "HydraulicState",
    "InfeasibleSpec",
    "InitialFlows",
    "LinearSystem",
    "Network",
    "NewtonStall",
    "ParseError",
    "SingularSystem",
    "SolverConfig",
    "SolverReport",
    "ValidationError",
    "WdnError",
    "assemble",
    "build_incidence",
    "canonicalize",
    "compare",
    "diagnose_initial_point",
    "dump_system",
    "emit_gp_monomials",
    "linear_system_at",
    "load_network",
    "newton_iterate",
    "newton_solve",
    "nonlinear_residuals",
    "parse_inp",
    "prune_closed",
    "read_inp",
    "recover_linear_rows",
    "run",
    "solve_linear",
    "validate",
    "write_inp",
]
