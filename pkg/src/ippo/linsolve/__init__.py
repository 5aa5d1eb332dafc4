"""LP and branch-and-bound solver used by every optimization in the package."""
from .bnb import bigm_expand, solve_milp
from .lpfile import lp_text, write_lp
from .model import (
    EQ, GE, INF, LE, Basis, ComplementarityPair, LinearProgram, MixedIntegerModel, ModelBuilder,
    ModelError, PrimalDualSolution, SeparablePWLTerm, SolverError, Status,
)
from .pwl import pwl_expand, quadratic_pwl, quadratic_pwl_error
from .simplex import StandardForm, certificate_residuals, solve_lp, solve_standard

__all__ = [
    "EQ", "GE", "INF", "LE", "Basis", "ComplementarityPair", "LinearProgram", "MixedIntegerModel",
    "ModelBuilder", "ModelError", "PrimalDualSolution", "SeparablePWLTerm", "SolverError", "Status",
    "StandardForm", "bigm_expand", "certificate_residuals", "lp_text", "pwl_expand",
    "quadratic_pwl", "quadratic_pwl_error", "solve_lp", "solve_milp", "solve_standard", "write_lp",
]
