"""Hierarchical Gaussian random field sampling and multilevel
delayed-acceptance MCMC for a mixed-FEM Darcy inverse problem."""

from .config import RunConfig
from .darcy import (
    BoundaryConditions,
    DarcySolution,
    DarcySystem,
    ObservationSet,
    compute_qoi,
    log_likelihood,
    observe,
    project_permeability,
    solve_darcy,
)
from .estimators import (
    LevelStats,
    RunSummary,
    acf,
    effective_cost,
    iact,
    optimal_samples,
    summarize,
    telescoping_estimate,
)
from .fem import SpdeOperators, assemble_mass, assemble_spde_operator, assemble_stiffness, mass_factor, matern_normalization
from .linalg import SolveReport, SolverError, SpdFactor, sparse_cholesky, spd_solve, sym_eig
from .mcmc import (
    ChainRecord,
    ForwardModelError,
    LevelModel,
    LevelState,
    MldaChain,
    MldaProblem,
    mh_step_level0,
    pcn_propose,
    run_chain,
)
from .mesh import (
    Hierarchy,
    MeshLevel,
    TransferOperator,
    build_hierarchy,
    build_mesh,
    prolongation,
    prolongation_matrix,
    restriction_apply,
)
from .samplers import (
    FieldRealization,
    KlBasis,
    WhiteNoise,
    compose_forcings,
    compute_kl_basis,
    kl_sample,
    kl_spde_decompose,
    mg_decompose,
    multilevel_field,
    sample_white_noise,
    spde_sample,
)

__version__ = "0.1.0"
