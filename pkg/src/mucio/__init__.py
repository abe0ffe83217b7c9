"""Algorithmic concentration of measure by online multiplicative tampering."""
from .core import (
    BernoulliProcess,
    BlockDomain,
    ContractViolation,
    DimensionError,
    EnumerationCapExceeded,
    GaussianProcess,
    MembershipOracle,
    ParameterError,
    ProductProcess,
    RandomProcess,
    RngStream,
    enumerate_support,
    sample_trajectory,
    threshold_set,
    weight_vector,
    weighted_hamming,
)
from .oracles import (
    ExactOracle,
    MonteCarloOracle,
    OracleBudget,
    ThresholdOracle,
    approx_max_block,
    exact_partial_expectation,
    mc_partial_expectation,
    oracle_sample_counts,
    threshold_partial_expectation,
)
from .tamper import (
    Case,
    StepDecision,
    TamperParams,
    TamperTranscript,
    additive_step,
    average_case_params,
    find_close_point,
    mucio_abort_step,
    mucio_step,
    run_tampering,
    worst_case_params,
)

__version__ = "0.1.0"
