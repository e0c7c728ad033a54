"""ANOVA simultaneous component analysis for designed multivariate experiments."""

from .design import (
    INTERCEPT,
    RESIDUAL,
    DesignSpec,
    Factor,
    Term,
    dof_of_term,
    parse_model_formula,
    reference_term,
    residual_dof,
)
from .coding import ModelMatrix, build_model_matrix, expand_constrained_effects
from .glm import (
    Decomposition,
    ResponseMatrix,
    SsReport,
    explained_variance,
    fit_ols,
    sum_of_squares,
    total_sum_of_squares,
)
from .prep import (
    ImputationAction,
    OutlierDiagnostics,
    PrepStep,
    PreprocessPlan,
    RawResponseMatrix,
    apply_plan,
    impute,
    outlier_diagnostics,
    scale,
    transform,
)
from .inference import (
    AscaTable,
    PermutationPlan,
    PermutationResult,
    adjust_pvalues,
    build_asca_table,
    f_ratio,
    permutation_test,
)
from .sca import ResidualPcaReport, ScaModel, dq_statistics, fit_sca, residual_pca
from .power import (
    GridAxis,
    PowerCurve,
    SimulationScenario,
    UnitSpec,
    build_design,
    power_curve,
    simulate_dataset,
)
from .pipeline import AssumptionReport, RunConfig, check_assumptions, run_fit, run_pipeline
from .errors import (
    AscaError,
    ConfigError,
    CsvFormatError,
    DegenerateDataError,
    EstimabilityError,
    FormulaError,
    InvalidDesignError,
    PreprocessError,
)

__version__ = "0.1.0"

__all__ = [
    "AscaError",
    "AscaTable",
    "AssumptionReport",
    "ConfigError",
    "CsvFormatError",
    "Decomposition",
    "DegenerateDataError",
    "DesignSpec",
    "EstimabilityError",
    "Factor",
    "FormulaError",
    "GridAxis",
    "INTERCEPT",
    "ImputationAction",
    "InvalidDesignError",
    "ModelMatrix",
    "OutlierDiagnostics",
    "PermutationPlan",
    "PermutationResult",
    "PowerCurve",
    "PrepStep",
    "PreprocessError",
    "PreprocessPlan",
    "RESIDUAL",
    "RawResponseMatrix",
    "ResidualPcaReport",
    "ResponseMatrix",
    "RunConfig",
    "ScaModel",
    "SimulationScenario",
    "SsReport",
    "Term",
    "UnitSpec",
    "adjust_pvalues",
    "apply_plan",
    "build_asca_table",
    "build_design",
    "build_model_matrix",
    "check_assumptions",
    "dof_of_term",
    "dq_statistics",
    "expand_constrained_effects",
    "explained_variance",
    "f_ratio",
    "fit_ols",
    "fit_sca",
    "impute",
    "outlier_diagnostics",
    "parse_model_formula",
    "permutation_test",
    "power_curve",
    "reference_term",
    "residual_dof",
    "residual_pca",
    "run_fit",
    "run_pipeline",
    "scale",
    "simulate_dataset",
    "sum_of_squares",
    "total_sum_of_squares",
    "transform",
]
