"""Mean-field-game edge caching: demand models, HJB/FPK solver, policy evaluation."""

from .demand import (
    CrpState,
    DemandState,
    OuParams,
    crp_mean_popularity,
    crp_probabilities,
    crp_sample_request,
    expected_distinct_files,
    ou_step,
)
from .errors import (
    BarrierViolationError,
    CflViolationError,
    ConfigError,
    MfcacheError,
    MissingArtifactError,
    NoCoverageError,
    NonConvergenceError,
)
from .mfg import (
    DensitySurface,
    Lattice,
    MfeSolution,
    PolicyField,
    SolverConfig,
    ValueSurface,
    expected_cost,
    hjb_residual,
    initial_density,
    make_lattice,
    mf_overlap,
    optimal_caching_fraction,
    solve_fpk_forward,
    solve_hjb_backward,
    solve_mfe,
)
from .policies import (
    BaselinePolicy,
    DecisionContext,
    IpiModel,
    MeanFieldPolicy,
    UniformRandomPolicy,
    make_policy,
    observe_popularity,
)
from .radio import (
    NetworkRealization,
    RadioEnvironment,
    active_probability,
    average_rate,
    dbm_to_watts,
    empirical_sinr,
    mean_field_interference,
    sample_network,
)
from .simulate import (
    CostLedger,
    SimConfig,
    Summary,
    aggregate,
    empirical_overlap,
    instantaneous_cost,
    next_storage,
    replication_seeds,
    run_replication,
    step_storage,
)

__version__ = "0.1.0"
