"""Budget-optimal two-phase sampling designs for selection-biased cohorts.

Plan an outcome-measurement study that recruits from a cohort (for example an
EHR system) that over- or under-represents parts of the target population:
model the cohort-inclusion probability, solve the variance-minimizing
second-phase sampling rule under a budget, draw the sample, and estimate the
population mean with a doubly-robust estimator and bootstrap intervals. A
Monte Carlo harness reproduces the accompanying efficiency study.
"""

from .config import Lambda1Spec, SimulationConfig
from .costs import AffineCost, ConstantCost, CostModel, TabulatedCost
from .design import (
    DesignInputs,
    DesignSolution,
    alternative_design,
    baseline_lambda2,
    design_variance,
    draw_second_phase,
    expected_cost,
    feasible_ne_range,
    kkt_residuals,
    optimal_lambda2,
    relative_efficiency,
)
from .errors import (
    ConvergenceError,
    InfeasibleDesignError,
    InputError,
    SchemaError,
    SeparationError,
    TwophaseError,
)
from .estimator import (
    EstimateResult,
    InfluenceContext,
    bootstrap_ci,
    impute_population_mean,
    influence,
    rr_estimate,
)
from .featurespec import FeatureSpec, linear_spec
from .frames import (
    ExternalProbabilitySample,
    FrameSchema,
    Individual,
    IndividualLevel,
    KnownDistribution,
    PopulationFrame,
    generate_population,
    read_external,
    read_frame,
    write_external,
    write_frame,
)
from .regress import (
    GlmFit,
    MeanModelFit,
    VarianceModelFit,
    compute_pve,
    fit_beta,
    fit_joint_mean_variance,
    fit_logistic,
    fit_mean,
    fit_variance,
)
from .selection import SelectionModel, fit_composed, fit_direct, known_selection
from .study import (
    StudyResult,
    calibrate_gamma,
    compare_designs,
    run_replication,
    run_study,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
