"""Data curation and preprocessing ahead of the factorization.

Covers missing-value handling (NaN is the missing marker; zeros and
below-detection values are data, not missing), element-wise transforms,
column scaling and PCA-based outlier diagnostics.  Row-wise instrument
normalizations are expected to happen before the matrix enters this module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats

from .design import DesignSpec
from .errors import DegenerateDataError, PreprocessError
from .glm import ResponseMatrix

IMPUTE_METHODS = ("drop_rows", "drop_cols", "unconditional_mean", "cell_mean")
TRANSFORM_METHODS = ("log", "sqrt", "box_cox", "rank")
SCALE_METHODS = ("mean_center", "autoscale", "reference_group")

BOX_COX_GRID = np.arange(-2.0, 2.0 + 1e-9, 0.5)


@dataclass(frozen=True, eq=False)
class RawResponseMatrix:
    """Response block that may still contain missing entries (NaN markers)."""

    values: np.ndarray
    variables: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise PreprocessError("raw response matrix must be 2-dimensional")
        object.__setattr__(self, "values", values)
        if len(self.variables) != values.shape[1]:
            raise PreprocessError("variable names do not match raw response columns")
        if len(self.sample_ids) != values.shape[0]:
            raise PreprocessError("sample ids do not match raw response rows")

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def resolved(self) -> ResponseMatrix:
        if self.missing_mask.any():
            raise PreprocessError("matrix still has missing entries; impute first")
        return ResponseMatrix(self.values.copy(), self.variables, self.sample_ids)


@dataclass(frozen=True)
class ImputationAction:
    sample_id: str
    variable: str
    action: str


def _design_cells(spec: DesignSpec) -> np.ndarray:
    cols = [spec.assignments[f.name] for f in spec.factors]
    _, inverse = np.unique(np.stack(cols, axis=1), axis=0, return_inverse=True)
    return inverse.astype(np.intp)


def _cell_label(spec: DesignSpec, row: int) -> str:
    return ", ".join(
        f"{f.name}={f.levels[spec.assignments[f.name][row]]}" for f in spec.factors
    )


def impute(
    raw: RawResponseMatrix,
    spec: DesignSpec | None,
    method: str = "cell_mean",
    *,
    max_missing_frac: float = 0.0,
) -> tuple[ResponseMatrix, list[ImputationAction]]:
    """Resolve missing entries; returns the finite matrix plus an action report.

    ``cell_mean`` fills each hole with the mean of observed values sharing the
    same design cell (all factors) and variable; ``unconditional_mean`` uses
    the column mean; the ``drop_*`` variants remove rows/columns whose missing
    fraction exceeds ``max_missing_frac`` and warn when that unbalances the
    design.  Observed entries are never touched.
    """
    if method not in IMPUTE_METHODS:
        raise PreprocessError(f"unknown imputation method {method!r}")
    mask = raw.missing_mask
    report: list[ImputationAction] = []
    if not mask.any():
        return raw.resolved(), report

    values = raw.values.copy()
    if method == "drop_rows":
        frac = mask.mean(axis=1)
        keep = frac <= max_missing_frac if max_missing_frac > 0 else ~mask.any(axis=1)
        for i in np.flatnonzero(~keep):
            report.append(ImputationAction(raw.sample_ids[i], "*", "dropped_row"))
        if not keep.any():
            raise PreprocessError("drop_rows would remove every sample")
        sub = values[keep]
        if np.isnan(sub).any():
            raise PreprocessError(
                "rows kept by drop_rows still contain missing values; "
                "chain another imputation step or lower the threshold"
            )
        warnings.warn(
            f"drop_rows removed {int((~keep).sum())} sample(s); "
            "the design may now be unbalanced",
            stacklevel=2,
        )
        out = ResponseMatrix(
            sub, raw.variables, tuple(s for s, k in zip(raw.sample_ids, keep) if k)
        )
        return out, report

    if method == "drop_cols":
        frac = mask.mean(axis=0)
        keep = frac <= max_missing_frac if max_missing_frac > 0 else ~mask.any(axis=0)
        for j in np.flatnonzero(~keep):
            report.append(ImputationAction("*", raw.variables[j], "dropped_col"))
        if not keep.any():
            raise PreprocessError("drop_cols would remove every variable")
        sub = values[:, keep]
        if np.isnan(sub).any():
            raise PreprocessError(
                "columns kept by drop_cols still contain missing values; "
                "chain another imputation step or lower the threshold"
            )
        warnings.warn(
            f"drop_cols removed {int((~keep).sum())} variable(s)", stacklevel=2
        )
        return (
            ResponseMatrix(sub, tuple(v for v, k in zip(raw.variables, keep) if k),
                           raw.sample_ids),
            report,
        )

    if method == "unconditional_mean":
        for j in range(values.shape[1]):
            holes = np.flatnonzero(mask[:, j])
            if len(holes) == 0:
                continue
            observed = values[~mask[:, j], j]
            if len(observed) == 0:
                raise PreprocessError(
                    f"variable {raw.variables[j]!r} has no observed values"
                )
            values[holes, j] = observed.mean()
            for i in holes:
                report.append(
                    ImputationAction(raw.sample_ids[i], raw.variables[j], "unconditional_mean")
                )
        return ResponseMatrix(values, raw.variables, raw.sample_ids), report

    # cell_mean
    if spec is None:
        raise PreprocessError("cell_mean imputation needs the design spec")
    if spec.n_samples != values.shape[0]:
        raise PreprocessError("design spec and raw matrix are not row-aligned")
    cells = _design_cells(spec)
    for j in range(values.shape[1]):
        holes = np.flatnonzero(mask[:, j])
        for i in holes:
            mates = (cells == cells[i]) & ~mask[:, j]
            if not mates.any():
                raise PreprocessError(
                    f"cell ({_cell_label(spec, i)}) has no observed value for "
                    f"variable {raw.variables[j]!r}; cell_mean imputation impossible"
                )
            values[i, j] = values[mates, j].mean()
            report.append(
                ImputationAction(raw.sample_ids[i], raw.variables[j], "cell_mean")
            )
    return ResponseMatrix(values, raw.variables, raw.sample_ids), report


# -- transforms ---------------------------------------------------------------


def _domain_error(name: str, variables, values, predicate) -> None:
    bad = np.argwhere(predicate(values))
    if len(bad):
        i, j = bad[0]
        raise PreprocessError(
            f"{name} transform: variable {variables[j]!r}, row {i + 1} has "
            f"value {values[i, j]!r} outside the transform domain"
        )


def _box_cox(col: np.ndarray, lmbda: float) -> np.ndarray:
    if lmbda == 0.0:
        return np.log(col)
    return (np.power(col, lmbda) - 1.0) / lmbda


def box_cox_auto_lambda(col: np.ndarray, grid: Sequence[float] = BOX_COX_GRID) -> float:
    """Grid-search lambda maximizing the Gaussian profile log-likelihood."""
    best, best_llf = grid[0], -np.inf
    for lmb in grid:
        llf = float(stats.boxcox_llf(lmb, col))
        if llf > best_llf:
            best, best_llf = lmb, llf
    return float(best)


def transform(
    Y: ResponseMatrix,
    method: str,
    *,
    lmbda: float | str | None = "auto",
    offset: float = 0.0,
) -> ResponseMatrix:
    """Element-wise column transform: log, sqrt, box_cox or rank.

    ``box_cox`` accepts an explicit ``lmbda`` or ``"auto"`` (per-column grid
    search over ``BOX_COX_GRID``); ``offset`` is added beforehand to shift the
    data into the positive domain.  ``rank`` assigns 1..n per column with
    average ranks on ties.
    """
    if method not in TRANSFORM_METHODS:
        raise PreprocessError(f"unknown transform {method!r}")
    values = Y.values + offset if offset else Y.values.copy()
    if method == "log":
        _domain_error("log", Y.variables, values, lambda v: v <= 0)
        out = np.log(values)
    elif method == "sqrt":
        _domain_error("sqrt", Y.variables, values, lambda v: v < 0)
        out = np.sqrt(values)
    elif method == "box_cox":
        _domain_error("box_cox", Y.variables, values, lambda v: v <= 0)
        out = np.empty_like(values)
        for j in range(values.shape[1]):
            lj = box_cox_auto_lambda(values[:, j]) if lmbda in (None, "auto") else float(lmbda)
            out[:, j] = _box_cox(values[:, j], lj)
    else:  # rank
        out = np.empty_like(values)
        for j in range(values.shape[1]):
            out[:, j] = stats.rankdata(values[:, j], method="average")
    return ResponseMatrix(out, Y.variables, Y.sample_ids)


def scale(
    Y: ResponseMatrix,
    method: str,
    *,
    spec: DesignSpec | None = None,
    factor: str | None = None,
    level: str | None = None,
) -> ResponseMatrix:
    """Column scaling: mean_center, autoscale, or reference_group.

    autoscale divides centered columns by their standard deviation (n-1
    denominator); reference_group divides by the standard deviation computed
    within one factor level (>= 2 samples required there).
    """
    if method not in SCALE_METHODS:
        raise PreprocessError(f"unknown scaling {method!r}")
    centered = Y.values - Y.values.mean(axis=0, keepdims=True)
    if method == "mean_center":
        return ResponseMatrix(centered, Y.variables, Y.sample_ids)
    if method == "autoscale":
        sd = Y.values.std(axis=0, ddof=1)
        dead = np.flatnonzero(sd == 0.0)
        if len(dead):
            names = [Y.variables[j] for j in dead]
            raise PreprocessError(f"zero-variance column(s) under autoscale: {names}")
        return ResponseMatrix(centered / sd, Y.variables, Y.sample_ids)
    # reference_group
    if spec is None or factor is None or level is None:
        raise PreprocessError("reference_group scaling needs spec, factor and level")
    f = spec.factor(factor)
    if level not in f.levels:
        raise PreprocessError(f"{level!r} is not a level of factor {factor!r}")
    rows = spec.assignments[factor] == f.levels.index(level)
    if rows.sum() < 2:
        raise PreprocessError(
            f"reference level {level!r} of {factor!r} has fewer than 2 samples"
        )
    sd = Y.values[rows].std(axis=0, ddof=1)
    dead = np.flatnonzero(sd == 0.0)
    if len(dead):
        names = [Y.variables[j] for j in dead]
        raise PreprocessError(f"zero variance in reference group for column(s): {names}")
    return ResponseMatrix(centered / sd, Y.variables, Y.sample_ids)


# -- outlier diagnostics -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OutlierDiagnostics:
    """Per-sample distance-to-model (D) and reconstruction residual (Q)."""

    d: np.ndarray
    q: np.ndarray
    flagged: tuple[int, ...]
    q_threshold: float
    n_components: int


def outlier_diagnostics(
    M: np.ndarray,
    n_components: int,
    *,
    flag_quantile: float = 0.99,
) -> OutlierDiagnostics:
    """Component-model diagnostics of a matrix (pass it preprocessed/centered).

    Fits a truncated SVD with ``n_components``; D is the Mahalanobis-style
    distance of each score vector, Q the squared reconstruction residual.
    Samples whose Q exceeds the ``flag_quantile`` of the empirical Q values
    are flagged; flagging never removes anything.
    """
    M = np.asarray(M, dtype=float)
    svals = np.linalg.svd(M, compute_uv=False)
    tol = max(M.shape) * np.finfo(float).eps * (svals[0] if len(svals) else 0.0)
    rank = int(np.sum(svals > tol))
    if n_components > rank:
        raise DegenerateDataError(
            f"requested {n_components} components but the matrix has rank {rank}"
        )
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    P = Vt[:n_components].T
    T = M @ P
    gram_inv = np.linalg.inv(T.T @ T)
    d = np.einsum("ij,jk,ik->i", T, gram_inv, T)
    resid = M - T @ P.T
    q = np.sum(resid * resid, axis=1)
    threshold = float(np.quantile(q, flag_quantile))
    flagged = tuple(int(i) for i in np.flatnonzero(q > threshold))
    return OutlierDiagnostics(d, q, flagged, threshold, n_components)


# -- preprocessing plans --------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrepStep:
    kind: str  # impute | transform | scale
    method: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class PreprocessPlan:
    """Ordered curation/preprocessing steps, applied exactly as declared."""

    steps: tuple[PrepStep, ...] = ()

    @classmethod
    def standard(
        cls,
        impute_method: str | None = None,
        transform_method: str | None = None,
        scale_method: str | None = None,
        **scale_params: Any,
    ) -> "PreprocessPlan":
        """Canonical order: imputation, then transform, then scaling."""
        steps: list[PrepStep] = []
        if impute_method:
            steps.append(PrepStep("impute", impute_method))
        if transform_method:
            steps.append(PrepStep("transform", transform_method))
        if scale_method:
            steps.append(PrepStep("scale", scale_method, dict(scale_params)))
        return cls(tuple(steps))


def apply_plan(
    raw: RawResponseMatrix,
    spec: DesignSpec | None,
    plan: PreprocessPlan,
) -> tuple[ResponseMatrix, list[ImputationAction]]:
    """Run a plan start to finish; collects imputation actions along the way."""
    report: list[ImputationAction] = []
    current: RawResponseMatrix | ResponseMatrix = raw
    for step in plan.steps:
        if step.kind == "impute":
            if not isinstance(current, RawResponseMatrix):
                current = RawResponseMatrix(current.values, current.variables,
                                            current.sample_ids)
            current, actions = impute(current, spec, step.method, **step.params)
            report.extend(actions)
        elif step.kind == "transform":
            current = transform(_as_response(current), step.method, **step.params)
        elif step.kind == "scale":
            current = scale(_as_response(current), step.method, spec=spec, **step.params)
        else:
            raise PreprocessError(f"unknown preprocessing step kind {step.kind!r}")
    return _as_response(current), report


def _as_response(m: RawResponseMatrix | ResponseMatrix) -> ResponseMatrix:
    if isinstance(m, RawResponseMatrix):
        return m.resolved()
    return m
