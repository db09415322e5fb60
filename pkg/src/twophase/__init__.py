"""Optimal second-phase sampling and estimation for two-phase case-control studies."""

from .core import (
    BINARY,
    CONTINUOUS,
    Coefficients,
    Cohort,
    LogisticFit,
    MomentModel,
    fit_logistic,
    newton_solve,
)
from .design import (
    PiEstimate,
    SamplingPlan,
    SchemeKind,
    SelectionIndicators,
    case_control_plan,
    design_objective,
    draw_indicators,
    estimate_pi,
    eta_from_mu,
    h_plus_approx,
    kt_update,
    make_plan,
    optimal_mu,
    proposed_plan,
    random_plan,
    selection_weight,
    sigma_tilde,
    solve_lambda,
    testlocal_plan,
)
from .estimators import (
    Estimate,
    EstimatorKind,
    RHatModel,
    SecondPhaseData,
    estimate_R,
    fit_estimator,
    ipw_fit,
    naive_fit,
    pcl_both_fit,
    pcl_validate_fit,
    var_beta_pclboth,
    var_beta_pclvalidate,
)
from .exceptions import (
    BracketFailure,
    DegenerateSE,
    DomainError,
    EmptyStratum,
    InputError,
    NoVariation,
    NonConvergence,
    Separation,
    SingularDesign,
    SingularInformation,
    SingularJacobian,
    SingularWeightMatrix,
    TwoPhaseError,
    ZeroWeightProbability,
)
from .inference import TestMethod, TestResult, score_test, wald_test

__version__ = "0.1.0"

__all__ = [
    "BINARY",
    "BracketFailure",
    "CONTINUOUS",
    "Coefficients",
    "Cohort",
    "DegenerateSE",
    "DomainError",
    "EmptyStratum",
    "Estimate",
    "EstimatorKind",
    "InputError",
    "LogisticFit",
    "MomentModel",
    "NoVariation",
    "NonConvergence",
    "PiEstimate",
    "RHatModel",
    "SamplingPlan",
    "SchemeKind",
    "SecondPhaseData",
    "SelectionIndicators",
    "Separation",
    "SingularDesign",
    "SingularInformation",
    "SingularJacobian",
    "SingularWeightMatrix",
    "TestMethod",
    "TestResult",
    "TwoPhaseError",
    "ZeroWeightProbability",
    "case_control_plan",
    "design_objective",
    "draw_indicators",
    "estimate_R",
    "estimate_pi",
    "eta_from_mu",
    "fit_estimator",
    "fit_logistic",
    "h_plus_approx",
    "ipw_fit",
    "kt_update",
    "make_plan",
    "naive_fit",
    "newton_solve",
    "optimal_mu",
    "pcl_both_fit",
    "pcl_validate_fit",
    "proposed_plan",
    "random_plan",
    "score_test",
    "selection_weight",
    "sigma_tilde",
    "solve_lambda",
    "testlocal_plan",
    "var_beta_pclboth",
    "var_beta_pclvalidate",
    "wald_test",
]
