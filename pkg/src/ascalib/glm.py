"""Ordinary-least-squares factorization into per-term effect matrices.

The fit splits a multivariate response into an intercept row, one effect
matrix per model term and a residual matrix; the pieces always add back up to
the original data.  Sum-of-squares attribution supports the simultaneous
convention (squared norm of each effect matrix) plus the sequential (type 1)
and adjusted (type 2 / type 3) refit conventions for unbalanced designs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .coding import ModelMatrix
from .design import DesignSpec, Term, nesting_ancestors
from .errors import DegenerateDataError, EstimabilityError, InvalidDesignError

SS_TYPES = ("simultaneous", "type1", "type2", "type3")


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """Fully observed numeric response block, samples by variables."""

    values: np.ndarray
    variables: tuple[str, ...]
    sample_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidDesignError("response matrix must be 2-dimensional")
        if not np.all(np.isfinite(values)):
            raise InvalidDesignError(
                "response matrix has non-finite entries; resolve missing values first"
            )
        object.__setattr__(self, "values", values)
        if len(self.variables) != values.shape[1]:
            raise InvalidDesignError("variable names do not match response columns")
        if len(self.sample_ids) != values.shape[0]:
            raise InvalidDesignError("sample ids do not match response rows")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Additive split of Y into intercept + per-term effect matrices + residuals."""

    terms: tuple[Term, ...]
    intercept: np.ndarray  # 1 x n_vars
    effects: Mapping[Term, np.ndarray]
    residuals: np.ndarray
    coefficients: Mapping[Term, np.ndarray]

    def reconstruct(self) -> np.ndarray:
        out = np.broadcast_to(self.intercept, self.residuals.shape).copy()
        for eff in self.effects.values():
            out += eff
        out += self.residuals
        return out


def decomposition_scale(d: "Decomposition") -> float:
    """Total SS of every fitted piece; the yardstick for 'numerically zero'."""
    scale = float(np.sum(d.residuals**2))
    scale += d.residuals.shape[0] * float(np.sum(d.intercept**2))
    for eff in d.effects.values():
        scale += float(np.sum(eff**2))
    return scale


def negligible_ss(ss: float, scale: float) -> bool:
    """True when a sum of squares is indistinguishable from solver noise."""
    return ss <= np.finfo(float).eps ** 2 * max(scale, 1.0) * 1e4


def _rank_tolerance(X: np.ndarray, svals: np.ndarray) -> float:
    return max(X.shape) * np.finfo(float).eps * (svals[0] if len(svals) else 0.0)


def _locate_deficient_span(mm: ModelMatrix) -> Term:
    """First term whose span fails to add its full width to the rank."""
    X = mm.values
    rank = 0
    for term in mm.spans:
        end = mm.spans[term].stop
        sub = X[:, :end]
        svals = np.linalg.svd(sub, compute_uv=False)
        new_rank = int(np.sum(svals > _rank_tolerance(sub, svals)))
        if new_rank - rank < mm.spans[term].stop - mm.spans[term].start:
            return term
        rank = new_rank
    raise AssertionError("no deficient span found")  # pragma: no cover


def fit_ols(mm: ModelMatrix, Y: ResponseMatrix) -> Decomposition:
    """Least-squares fit of the coded model; effect matrix per term.

    Raises :class:`EstimabilityError` naming the first deficient term span if
    the model matrix is rank deficient beyond the standard singular-value
    tolerance.
    """
    X = mm.values
    if X.shape[0] != Y.n_samples:
        raise InvalidDesignError("model matrix and response are not row-aligned")
    svals = np.linalg.svd(X, compute_uv=False)
    if int(np.sum(svals > _rank_tolerance(X, svals))) < X.shape[1]:
        term = _locate_deficient_span(mm)
        raise EstimabilityError(
            f"model matrix is rank deficient within the span of term {term.label!r}"
        )
    B, *_ = np.linalg.lstsq(X, Y.values, rcond=None)
    terms = tuple(mm.spans)
    coefficients = {t: B[mm.spans[t]] for t in terms}
    effects = {t: X[:, mm.spans[t]] @ B[mm.spans[t]] for t in terms[1:]}
    fitted = X @ B
    residuals = Y.values - fitted
    return Decomposition(terms, coefficients[terms[0]], effects, residuals, coefficients)


@dataclass(frozen=True, eq=False)
class SsReport:
    """Per-term sum-of-squares attribution under one convention."""

    ss_type: str
    terms: tuple[Term, ...]  # non-intercept model terms, table order
    ss: Mapping[Term, float]
    residual_ss: float
    total_ss: float
    order: tuple[Term, ...] | None = None  # sequential order used by type1

    def percent(self, term: Term) -> float:
        if self.total_ss == 0.0:
            raise DegenerateDataError("total SS is zero; explained variance undefined")
        return 100.0 * self.ss[term] / self.total_ss

    @property
    def percent_residual(self) -> float:
        if self.total_ss == 0.0:
            raise DegenerateDataError("total SS is zero; explained variance undefined")
        return 100.0 * self.residual_ss / self.total_ss

    @property
    def percent_total(self) -> float:
        """Sum of all row percentages; exceeds 100 when variance is double-counted."""
        return sum(self.percent(t) for t in self.terms) + self.percent_residual

    @property
    def additivity_gap(self) -> float:
        """(sum of term SS + residual SS) - total SS; zero for orthogonal splits."""
        return sum(self.ss.values()) + self.residual_ss - self.total_ss


def total_sum_of_squares(Y: ResponseMatrix) -> float:
    """Squared norm of the column-centered response."""
    centered = Y.values - Y.values.mean(axis=0, keepdims=True)
    return float(np.sum(centered * centered))


def _expanded_factors(term: Term, spec: DesignSpec) -> frozenset[str]:
    names = set(term.factors)
    for name in term.factors:
        names.update(nesting_ancestors(name, spec._factor_map))
    return frozenset(names)


def _contains(spec: DesignSpec, outer: Term, inner: Term) -> bool:
    """True when `outer` contains `inner` (nesting-expanded factor sets)."""
    return _expanded_factors(inner, spec) <= _expanded_factors(outer, spec)


class _Refitter:
    """Caches residual SS of submodels (intercept + term subset) of one fit."""

    def __init__(self, mm: ModelMatrix, Y: ResponseMatrix):
        self.mm = mm
        self.Y = Y
        terms = tuple(mm.spans)
        self.intercept_span = mm.spans[terms[0]]
        self.model_terms = terms[1:]
        self._cache: dict[frozenset, float] = {}

    def residual_ss(self, subset: Sequence[Term]) -> float:
        key = frozenset((t.kind, t.factors) for t in subset)
        if key in self._cache:
            return self._cache[key]
        spans = [self.intercept_span]
        spans += [self.mm.spans[t] for t in self.model_terms
                  if (t.kind, t.factors) in key]
        cols = np.concatenate([self.mm.values[:, s] for s in spans], axis=1)
        B, _, rank, _ = np.linalg.lstsq(cols, self.Y.values, rcond=None)
        if rank < cols.shape[1]:
            labels = " + ".join(t.label for t in subset) or "(intercept)"
            raise EstimabilityError(
                f"submodel [{labels}] is rank deficient; adjusted SS undefined"
            )
        resid = self.Y.values - cols @ B
        value = float(np.sum(resid * resid))
        self._cache[key] = value
        return value


def sum_of_squares(
    d: Decomposition,
    mm: ModelMatrix,
    Y: ResponseMatrix,
    convention: str = "simultaneous",
    *,
    order: Sequence[Term] | None = None,
    spec: DesignSpec | None = None,
) -> SsReport:
    """Attribute sums of squares to model terms under the chosen convention.

    simultaneous: squared norm of each effect matrix from the joint fit.
    type1: sequential reduction in residual SS, default order = declaration.
    type2: reduction from adding the term to the model of all terms that do
    not contain it (``spec`` required to resolve nesting containment).
    type3: reduction relative to the model of all other terms; requires sum
    coding (the sum-to-zero constraints make these marginal tests meaningful).
    """
    if convention not in SS_TYPES:
        raise InvalidDesignError(f"unknown SS convention {convention!r}; pick one of {SS_TYPES}")
    model_terms = tuple(d.terms)[1:]
    total = total_sum_of_squares(Y)
    residual = float(np.sum(d.residuals * d.residuals))

    if convention == "simultaneous":
        ss = {t: float(np.sum(d.effects[t] ** 2)) for t in model_terms}
        return SsReport("simultaneous", model_terms, ss, residual, total)

    refit = _Refitter(mm, Y)
    if convention == "type1":
        seq = tuple(order) if order is not None else model_terms
        if {(t.kind, t.factors) for t in seq} != {(t.kind, t.factors) for t in model_terms}:
            raise InvalidDesignError("type1 order must be a permutation of the model terms")
        ss: dict[Term, float] = {}
        prior: list[Term] = []
        prev = refit.residual_ss(prior)
        for t in seq:
            prior.append(t)
            cur = refit.residual_ss(prior)
            ss[t] = prev - cur
            prev = cur
        return SsReport("type1", model_terms, ss, residual, total, order=seq)

    if convention == "type2":
        if spec is None:
            raise InvalidDesignError("type2 needs the design spec to resolve containment")
        ss = {}
        for t in model_terms:
            others = [u for u in model_terms if u is not t and not _contains(spec, u, t)]
            ss[t] = refit.residual_ss(others) - refit.residual_ss(others + [t])
        return SsReport("type2", model_terms, ss, residual, total)

    # type3
    if mm.scheme != "sum":
        raise InvalidDesignError("type3 SS requires sum coding (sum-to-zero constraints)")
    full = refit.residual_ss(list(model_terms))
    ss = {
        t: refit.residual_ss([u for u in model_terms if u is not t]) - full
        for t in model_terms
    }
    return SsReport("type3", model_terms, ss, residual, total)


def explained_variance(report: SsReport, term: Term) -> float:
    """Percentage of the total (centered) SS attributed to one term."""
    if term not in report.ss:
        raise InvalidDesignError(f"term {term.label!r} not present in the report")
    return report.percent(term)
