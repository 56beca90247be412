"""Allen-Cahn finite elements with variable mobility and a posteriori stability estimates."""
from .certify import (Certificate, GronwallProblem, GronwallResult, assemble_certificate,
                      constant_mobility_certificate, gronwall_bound, initial_relative_terms)
from .config import RunConfig, initial_condition_annulus, load_config
from .eigen import integrated_positive_eigenvalue, principal_eigenvalue
from .estimator import elliptic_indicator, estimate_trajectory
from .fem import FEFunction, FESpace, l2_project
from .mesh import Mesh, build_structured_mesh
from .model import (constant_mobility, default_mobility, derive_bound_constants, quadratic_potential,
                    quartic_potential)
from .solver import Trajectory, advance_timestep, run_simulation

__version__ = "0.1.0"

__all__ = [
    "Certificate", "GronwallProblem", "GronwallResult", "assemble_certificate", "constant_mobility_certificate",
    "gronwall_bound", "initial_relative_terms", "RunConfig", "initial_condition_annulus", "load_config",
    "integrated_positive_eigenvalue", "principal_eigenvalue", "elliptic_indicator", "estimate_trajectory",
    "FEFunction", "FESpace", "l2_project", "Mesh", "build_structured_mesh", "constant_mobility",
    "default_mobility", "derive_bound_constants", "quadratic_potential", "quartic_potential", "Trajectory",
    "advance_timestep", "run_simulation",
]
