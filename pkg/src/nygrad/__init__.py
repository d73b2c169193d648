"""Matrix-free approximate hypergradients for bilevel optimization.

The package computes the implicit-differentiation hypergradient with the
inverse-Hessian-vector product supplied by one of three exchangeable
backends: a column-sampled low-rank (Nystrom) approximation inverted via
the Woodbury identity, truncated conjugate gradient, or a truncated
Neumann series. A bilevel driver, synthetic tasks with analytic
derivatives, and a benchmark CLI sit on top.
"""

from .errors import (
    BackendError,
    CapabilityError,
    DegeneratePivotError,
    DivergenceError,
    NygradError,
)
from .linop import (
    CallCounter,
    DenseOperator,
    HvpOracle,
    counting_oracle,
    dense_regularized_inverse_apply,
    hvp_column,
    operator_norm,
)
from .nystrom import (
    InverseApplyPlan,
    NystromFactors,
    SampledIndices,
    SamplingStrategy,
    build_factors,
    inverse_apply,
    inverse_dense,
    nystrom_error_opnorm,
    sample_indices,
    theorem1_bound,
)
from .iterative import CgConfig, CgResult, NeumannConfig, cg_solve, neumann_apply
from .hypergrad import (
    CgIhvp,
    DerivativeBundle,
    IhvpConfig,
    NeumannIhvp,
    NystromIhvp,
    RunDiagnostics,
    dense_hypergradient,
    hypergradient,
    hypergradient_error,
)
from .bilevel import (
    AdamConfig,
    BilevelProblem,
    RunRecord,
    ScheduleConfig,
    SgdConfig,
    SgdMomentumConfig,
    bundle_at,
    compare_backends,
    run,
)
from .tasks import (
    LogRegTask,
    LogRegTaskSpec,
    LowRankDemoSpec,
    QuadraticTask,
    QuadraticTaskSpec,
    logreg_bundle,
    make_lowrank_demo,
    quadratic_closed_form_hypergradient,
)
from .workspace import WorkspaceMeter, track_workspace

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "BackendError",
    "BilevelProblem",
    "CallCounter",
    "CapabilityError",
    "CgConfig",
    "CgIhvp",
    "CgResult",
    "DegeneratePivotError",
    "DenseOperator",
    "DerivativeBundle",
    "DivergenceError",
    "HvpOracle",
    "IhvpConfig",
    "InverseApplyPlan",
    "LogRegTask",
    "LogRegTaskSpec",
    "LowRankDemoSpec",
    "NeumannConfig",
    "NeumannIhvp",
    "NygradError",
    "NystromFactors",
    "NystromIhvp",
    "QuadraticTask",
    "QuadraticTaskSpec",
    "RunDiagnostics",
    "RunRecord",
    "SampledIndices",
    "SamplingStrategy",
    "ScheduleConfig",
    "SgdConfig",
    "SgdMomentumConfig",
    "WorkspaceMeter",
    "build_factors",
    "bundle_at",
    "compare_backends",
    "counting_oracle",
    "dense_hypergradient",
    "dense_regularized_inverse_apply",
    "hvp_column",
    "hypergradient",
    "hypergradient_error",
    "inverse_apply",
    "inverse_dense",
    "logreg_bundle",
    "make_lowrank_demo",
    "nystrom_error_opnorm",
    "operator_norm",
    "quadratic_closed_form_hypergradient",
    "run",
    "sample_indices",
    "theorem1_bound",
    "track_workspace",
]
