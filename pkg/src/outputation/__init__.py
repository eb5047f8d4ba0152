"""Within-cluster resampling (multiple outputation) inference.

Estimation for clustered continuous outcomes by repeatedly subsampling
B observations per cluster, fitting a GEE on each subsample, and
averaging.  Alongside the classical moment-based variance of that
average (which can go negative in finite samples), the package provides
a strictly positive stabilized variance: the mean per-subsample sandwich
scaled by (1/n) * sum_i B/m_i.
"""

from .data import (
    ClusteredDataset,
    Observation,
    ScreenReport,
    load_long_csv,
    screen_predictors,
    validate_min_cluster_size,
    write_long_csv,
)
from .engine import (
    EnumerationSummary,
    IndexDraw,
    OutputationAccumulator,
    OutputationPlan,
    draw_indices,
    enumerate_all_outputations,
    merge,
    run_outputations,
)
from .exceptions import (
    CannotAssessError,
    EmptyDataError,
    EnumerationLimitError,
    InsufficientOutputationsError,
    MergeError,
    OutputationError,
    ParseError,
    SchemaError,
    SingularDesignError,
    SizeViolationError,
)
from .gee import (
    EXCHANGEABLE,
    INDEPENDENCE,
    MANCL_DEROUEN,
    GeeFit,
    fit_gee,
    mancl_derouen_covariance,
)
from .inference import (
    MoInference,
    WaldResult,
    mo_inference,
    moment_variance,
    outputations_for_ratio,
    overlap_probability,
    overlap_probability_exact,
    required_outputations,
    shrink_factor,
    stabilized_variance,
    wald_inference,
)
from .simulate import (
    SimulationReport,
    SimulationSpec,
    gen_random_intercepts,
    run_power,
    run_type1,
    variance_trajectory,
)

__version__ = "0.1.0"

__all__ = [
    "ClusteredDataset",
    "Observation",
    "ScreenReport",
    "load_long_csv",
    "write_long_csv",
    "validate_min_cluster_size",
    "screen_predictors",
    "GeeFit",
    "fit_gee",
    "mancl_derouen_covariance",
    "INDEPENDENCE",
    "EXCHANGEABLE",
    "MANCL_DEROUEN",
    "OutputationPlan",
    "IndexDraw",
    "OutputationAccumulator",
    "draw_indices",
    "run_outputations",
    "enumerate_all_outputations",
    "EnumerationSummary",
    "merge",
    "MoInference",
    "WaldResult",
    "mo_inference",
    "moment_variance",
    "stabilized_variance",
    "shrink_factor",
    "overlap_probability",
    "overlap_probability_exact",
    "required_outputations",
    "outputations_for_ratio",
    "wald_inference",
    "SimulationSpec",
    "SimulationReport",
    "gen_random_intercepts",
    "run_type1",
    "run_power",
    "variance_trajectory",
    "OutputationError",
    "SchemaError",
    "ParseError",
    "EmptyDataError",
    "SizeViolationError",
    "SingularDesignError",
    "InsufficientOutputationsError",
    "CannotAssessError",
    "MergeError",
    "EnumerationLimitError",
]
