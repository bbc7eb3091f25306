"""Numerical mean-field investment games with jumps and relative performance.

Backward equations with jumps are solved on a recombining lattice (exact
conditional expectations) or by least-squares Monte Carlo, and the
equilibrium strategy is assembled from a reference and an auxiliary equation.
"""

from importlib import metadata

from .equilibrium import ClaimSpec, closed_form_theta, solve_mfg_lattice, solve_mfg_lsmc
from .errors import ConfigurationError, MfgJumpError, SingularityError, SolverError
from .jbsde import AUXILIARY, SINGLE_AGENT, BasisSpec, GeneratorSpec, solve_lattice, solve_lsmc
from .lattice import build_lattice
from .scenario import load_scenario, shipped_scenarios

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = [
    "AUXILIARY",
    "SINGLE_AGENT",
    "BasisSpec",
    "ClaimSpec",
    "ConfigurationError",
    "GeneratorSpec",
    "MfgJumpError",
    "SingularityError",
    "SolverError",
    "build_lattice",
    "closed_form_theta",
    "load_scenario",
    "shipped_scenarios",
    "solve_lattice",
    "solve_lsmc",
    "solve_mfg_lattice",
    "solve_mfg_lsmc",
]
