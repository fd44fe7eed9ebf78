"""Maximum-entropy layer maps, their saddle-point inverse, manifold sampling
and projected belief network autoencoders."""

__version__ = "0.1.0"

from .errors import (
    BoundaryState,
    DomainViolation,
    EmptyInterval,
    InfeasibleStart,
    InvalidInput,
    MaxEntError,
    NotPositiveDefinite,
    OracleUnavailable,
    RankDeficient,
    ReconstructionInfeasible,
    SupportViolation,
    TrainingDiverged,
)
from .expfamily import (
    ActivationKind,
    UnivariateLaw,
    inverse_lambda,
    lambda_prime,
    log_density,
    log_partition,
    mean_lambda,
    relu_limit_mean,
    sample,
    sample_univariate,
    truncated_interval_gaussian,
)
from .io import load_model, save_model
from .manifold import (
    ChainState,
    conditional_mean_oracle,
    feasible_segment,
    gaussian_manifold_sample,
    hit_and_run_step,
    run_chain,
    run_chains,
)
from .numerics import (
    RngStream,
    null_space_basis,
    scaled_erfc,
    spd_solve,
    std_normal_cdf,
    std_normal_pdf,
)
from .pbn import (
    PbnLayer,
    PbnNetwork,
    SamplingEfficiencyReport,
    backward_reconstruct,
    forward,
    init_network,
    layerwise_efficiency,
    loss_and_grad,
    reconstruct,
    reconstruct_batch,
    sampling_efficiency,
    train_autoencoder,
)
from .saddle import (
    LayerMap,
    SaddleSolution,
    SolverConfig,
    gamma,
    gamma_inverse,
    inverse_vjp,
    solution_jacobians,
    vjp_through_inverse,
)
