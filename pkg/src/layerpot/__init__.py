"""Layer potentials and fundamental solutions for divergence-form systems.

Functional-calculus construction of double and single layer potentials for
second order divergence-form elliptic systems with bounded accretive,
transversally independent coefficients on the half space, discretized on a
periodic Fourier grid.
"""

__version__ = "0.1.0"

from .coeff import (
    BlockCoefficient,
    CoefficientField,
    NotAccretive,
    ReflectionN,
    SingularNormalBlock,
    accretivity_bounds,
    coefficient_field_from_config,
    dual_hat_check,
    hat_involution_check,
    hat_transform,
    lipschitz_pullback,
)
from .funcalc import (
    DefectiveSpectrum,
    GapViolation,
    Semigroup,
    SideMismatch,
    SpectralSplit,
    assemble_BD,
    assemble_DB,
    b_t_of_BD,
    operator_bundle,
    semigroup_apply,
    spectral_split,
)
from .fundsol import (
    DegenerateDualPairing,
    PoleEvaluation,
    PoleKernel,
    ShearUnresolved,
    TailNotConverged,
    annular_decay,
    construct_pole_kernel,
    distributional_identity_check,
    laplace_kernel,
    lipschitz_invariance_check,
    pointwise_bound_check,
    tdep_fundamental_solution,
)
from .harness import BaselineMismatch, ConfigInvalid, ExperimentConfig, run
from .layers import (
    NotInvertible,
    SolutionSlice,
    WhitneyParams,
    coefficient_stability,
    conjugate_system,
    double_layer_boundary,
    double_layer_t,
    kkpt_sweep,
    nontangential_maximal,
    single_layer_gradient_t,
    solve_dirichlet,
    solve_neumann,
    square_function_norm,
)
from .torus import (
    DenseOperator,
    GridField,
    TorusGrid,
    assemble_D,
    curl_free_projection,
    garding_check,
    multiplication_operator,
)
