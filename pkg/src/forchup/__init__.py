"""Upscaling of nonlinear Forchheimer flow in heterogeneous porous media.

Fine-scale permeability, porosity and g-polynomial fields are upscaled block
by block to an effective tensor ``k*``, porosity ``Phi*`` and tabulated
mobility ``G*``.  Fine and coarse models are solved with the same Q1 finite
element code and compared through average velocities and the productivity
index of the pseudo-steady state.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConvergenceError,
    DomainError,
    ForchupError,
    MaxIterationsExceeded,
    SolverError,
    StageError,
)
from .forchheimer import GField, GPolynomial, eval_G, eval_G_twoterm, eval_g, eval_h, invert_h  # noqa: E402
from .grid import BlockPartition, ScalarCellField, StructuredGrid, generate_permeability  # noqa: E402
from .fem import (  # noqa: E402
    BoundarySpec,
    Dirichlet,
    Flux,
    NoFlux,
    Periodic,
    Well,
    solve_linear_elliptic,
    solve_steady_nonlinear,
    solve_transient,
)
from .upscaling import (  # noqa: E402
    CoarseModel,
    FineModel,
    GStarControls,
    GStarTable,
    UpscaleOptions,
    build_gstar_table,
    upscale_all_blocks,
    upscale_k_linear,
)
from .layered import LayerStack  # noqa: E402
from .diagnostics import Discretization, pi_pss, solve_basic_profile, velocity_error  # noqa: E402

__all__ = [
    "__version__",
    "ForchupError", "DomainError", "ConvergenceError", "MaxIterationsExceeded", "SolverError", "StageError",
    "GPolynomial", "GField", "eval_g", "eval_h", "invert_h", "eval_G", "eval_G_twoterm",
    "StructuredGrid", "ScalarCellField", "BlockPartition", "generate_permeability",
    "BoundarySpec", "Dirichlet", "NoFlux", "Flux", "Well", "Periodic",
    "solve_linear_elliptic", "solve_steady_nonlinear", "solve_transient",
    "FineModel", "CoarseModel", "GStarControls", "GStarTable", "UpscaleOptions",
    "build_gstar_table", "upscale_all_blocks", "upscale_k_linear",
    "LayerStack", "Discretization", "pi_pss", "solve_basic_profile", "velocity_error",
]
