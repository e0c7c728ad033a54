"""Design-aware F-ratios, permutation tests and multiple-testing utilities.

Permutations use a counter-based generator keyed by (seed, permutation index)
so results are bit-reproducible regardless of evaluation order or worker
count.  Exceedances are counted with >= and the empirical p-value is
(count + 1) / (K + 1), never below 1/(K+1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import permutations as iter_permutations
from typing import Mapping

import numpy as np

from .coding import ModelMatrix
from .design import DesignSpec, Term, dof_of_term, reference_term, residual_dof
from .errors import DegenerateDataError, InvalidDesignError
from .glm import ResponseMatrix, SsReport, total_sum_of_squares

STRATEGIES = ("unconstrained_rows", "residual_reduced_model")
STATISTICS = ("F", "SS", "MS", "EV")
_REJECTED_STRATEGIES = ("constrained", "marginalized")

_MASK64 = (1 << 64) - 1
_PERM_BATCH = 256


def permutation_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one permutation index (Philox, 2-word key)."""
    key = np.array([seed & _MASK64, index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class PermutationPlan:
    """How to build the empirical null: strategy, count, seed and statistic."""

    strategy: str = "unconstrained_rows"
    n_permutations: int = 999
    seed: int = 0
    statistic: str = "F"

    def __post_init__(self) -> None:
        if self.strategy in _REJECTED_STRATEGIES:
            raise InvalidDesignError(
                f"{self.strategy!r} permutations are not implemented; this is a "
                "documented extension point (supported: "
                f"{', '.join(STRATEGIES)})"
            )
        if self.strategy not in STRATEGIES:
            raise InvalidDesignError(
                f"unknown permutation strategy {self.strategy!r}; pick one of {STRATEGIES}"
            )
        if self.statistic not in STATISTICS:
            raise InvalidDesignError(
                f"unknown test statistic {self.statistic!r}; pick one of {STATISTICS}"
            )
        if self.n_permutations < 19:
            raise InvalidDesignError(
                "at least 19 permutations are needed to resolve p <= 0.05"
            )


def f_ratio(report: SsReport, spec: DesignSpec, term: Term) -> float:
    """Term MS over its design-selected reference MS (random term or residuals)."""
    ref = reference_term(spec, term)
    dof_t = dof_of_term(spec, term)
    if dof_t <= 0:
        raise InvalidDesignError(f"term {term.label!r} has no degrees of freedom")
    ms_t = report.ss[term] / dof_t
    if ref.kind == "residual":
        dof_r = residual_dof(spec)
        if dof_r <= 0:
            raise InvalidDesignError("saturated model: residuals have no DoFs")
        ms_r = report.residual_ss / dof_r
    else:
        ms_r = report.ss[ref] / dof_of_term(spec, ref)
    return _safe_ratio(ms_t, ms_r)


def _safe_ratio(num: float, den: float) -> float:
    # Zero reference MS: flag with +inf unless the numerator is zero too.
    if den == 0.0:
        return np.inf if num > 0.0 else 0.0
    return num / den


@dataclass(eq=False)
class PermutationResult:
    """Empirical p-values plus the sampled null distributions per term."""

    plan: PermutationPlan
    terms: tuple[Term, ...]
    observed: dict[Term, float]
    p_values: dict[Term, float]
    null_samples: dict[Term, np.ndarray]
    n_used: int
    exact: bool


class _Refit:
    """Precomputed least-squares machinery for repeated refits of one model."""

    def __init__(self, mm: ModelMatrix, spec: DesignSpec):
        self.mm = mm
        self.spec = spec
        X = mm.values
        self.pinv = np.linalg.pinv(X)
        self.r_full = np.linalg.qr(X, mode="r")
        self.model_terms = tuple(mm.spans)[1:]
        self.r_term = {
            t: np.linalg.qr(X[:, mm.spans[t]], mode="r") for t in self.model_terms
        }
        self.dof = {t: dof_of_term(spec, t) for t in self.model_terms}
        self.dof_res = residual_dof(spec)
        self.reference = {t: reference_term(spec, t) for t in self.model_terms}
        self.n = X.shape[0]

    def coefficients(self, Y: np.ndarray) -> np.ndarray:
        """Batched OLS coefficients; Y may be (n, p) or (batch, n, p)."""
        return self.pinv @ Y

    def term_ss(self, B: np.ndarray) -> dict[Term, np.ndarray]:
        out = {}
        for t in self.model_terms:
            Bt = B[..., self.mm.spans[t], :]
            out[t] = np.sum((self.r_term[t] @ Bt) ** 2, axis=(-2, -1))
        return out

    def residual_ss(self, B: np.ndarray, ynorm2: np.ndarray) -> np.ndarray:
        fitted = np.sum((self.r_full @ B) ** 2, axis=(-2, -1))
        return np.maximum(ynorm2 - fitted, 0.0)

    def statistics(
        self, statistic: str, Y: np.ndarray, total_ss: np.ndarray | float | None = None
    ) -> dict[Term, np.ndarray]:
        """Per-term statistic values for a (batch of) response matrices."""
        B = self.coefficients(Y)
        ss = self.term_ss(B)
        if statistic == "SS":
            return ss
        if statistic == "MS":
            return {t: ss[t] / self.dof[t] for t in self.model_terms}
        if statistic == "EV":
            return {t: 100.0 * ss[t] / total_ss for t in self.model_terms}
        ynorm2 = np.sum(Y * Y, axis=(-2, -1))
        res = self.residual_ss(B, ynorm2)
        out = {}
        for t in self.model_terms:
            ref = self.reference[t]
            if ref.kind == "residual":
                ms_ref = res / self.dof_res if self.dof_res > 0 else np.zeros_like(res)
            else:
                ms_ref = ss[ref] / self.dof[ref]
            num = ss[t] / self.dof[t]
            with np.errstate(divide="ignore", invalid="ignore"):
                f = np.asarray(num / ms_ref, dtype=float)
            zero_ref = np.asarray(ms_ref) == 0.0
            f = np.where(zero_ref, np.where(np.asarray(num) > 0.0, np.inf, 0.0), f)
            out[t] = f
        return out


def _centered_ss(Y: np.ndarray) -> np.ndarray:
    mean = Y.mean(axis=-2, keepdims=True)
    return np.sum((Y - mean) ** 2, axis=(-2, -1))


def _permutation_indices(n: int, plan: PermutationPlan) -> tuple[np.ndarray, bool]:
    """(K, n) row orders; exact enumeration when n! fits within the budget."""
    if n <= 20 and math.factorial(n) <= plan.n_permutations:
        # Drop the identity: it is the observed arrangement itself.
        all_perms = np.array(list(iter_permutations(range(n))), dtype=np.intp)
        keep = ~(all_perms == np.arange(n)).all(axis=1)
        return all_perms[keep], True
    perms = np.empty((plan.n_permutations, n), dtype=np.intp)
    for k in range(plan.n_permutations):
        perms[k] = permutation_rng(plan.seed, k + 1).permutation(n)
    return perms, False


def permutation_test(
    plan: PermutationPlan,
    spec: DesignSpec,
    mm: ModelMatrix,
    Y: ResponseMatrix,
) -> PermutationResult:
    """Empirical per-term p-values under the plan's strategy and statistic.

    ``unconstrained_rows`` re-fits the full model once per permuted row order
    of Y, yielding statistics for every term from a single run.  The
    ``residual_reduced_model`` strategy instead, per tested term, permutes the
    residuals of the fit without that term, adds back the reduced-model fit
    and re-fits.  Both the numerator and the reference MS are recomputed from
    each permuted fit.
    """
    total = total_sum_of_squares(Y)
    if total == 0.0:
        raise DegenerateDataError("all-constant response: permutation test undefined")
    refit = _Refit(mm, spec)
    perms, exact = _permutation_indices(refit.n, plan)
    n_used = len(perms)

    observed_arr = refit.statistics(plan.statistic, Y.values, total_ss=total)
    observed = {t: float(observed_arr[t]) for t in refit.model_terms}

    nulls = {t: np.empty(n_used) for t in refit.model_terms}
    if plan.strategy == "unconstrained_rows":
        for start in range(0, n_used, _PERM_BATCH):
            idx = perms[start : start + _PERM_BATCH]
            Yp = Y.values[idx]
            # Row permutation leaves the centered total SS unchanged.
            stats = refit.statistics(plan.statistic, Yp, total_ss=total)
            for t in refit.model_terms:
                nulls[t][start : start + len(idx)] = stats[t]
    else:
        for t in refit.model_terms:
            cols = np.ones(mm.n_columns, dtype=bool)
            cols[mm.spans[t]] = False
            X_red = mm.values[:, cols]
            B_red, *_ = np.linalg.lstsq(X_red, Y.values, rcond=None)
            fitted_red = X_red @ B_red
            resid_red = Y.values - fitted_red
            for start in range(0, n_used, _PERM_BATCH):
                idx = perms[start : start + _PERM_BATCH]
                Ystar = fitted_red + resid_red[idx]
                total_star = _centered_ss(Ystar) if plan.statistic == "EV" else total
                stats = refit.statistics(plan.statistic, Ystar, total_ss=total_star)
                nulls[t][start : start + len(idx)] = stats[t]

    p_values = {
        t: (int(np.sum(nulls[t] >= observed[t])) + 1) / (n_used + 1)
        for t in refit.model_terms
    }
    return PermutationResult(
        plan, refit.model_terms, observed, p_values, nulls, n_used, exact
    )


def adjust_pvalues(p, method: str = "benjamini_hochberg") -> np.ndarray:
    """Multiple-testing adjustment: Bonferroni or Benjamini-Hochberg step-up."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p.copy()
    if np.any(p <= 0) or np.any(p > 1):
        raise InvalidDesignError("p-values must lie in (0, 1]")
    m = p.size
    if method == "bonferroni":
        return np.minimum(1.0, m * p)
    if method != "benjamini_hochberg":
        raise InvalidDesignError(f"unknown adjustment method {method!r}")
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, m * p[i] / rank)
        adjusted[i] = running
    return adjusted


# -- result table ---------------------------------------------------------------


@dataclass(frozen=True)
class AscaTableRow:
    name: str
    ss: float
    percent: float
    dof: float
    ms: float
    f: float | None = None
    p: float | None = None


@dataclass(eq=False)
class AscaTable:
    """Per-term SS / %SS / DoFs / MS / F / p-value rows plus residual and total."""

    rows: tuple[AscaTableRow, ...]
    residual: AscaTableRow
    total: AscaTableRow

    HEADER = ("", "SS", "%SS", "DoFs", "MS", "F", "p-value")

    def all_rows(self) -> tuple[AscaTableRow, ...]:
        return self.rows + (self.residual, self.total)

    def to_csv_text(self) -> str:
        lines = [",".join(self.HEADER)]
        for row in self.all_rows():
            cells = [
                row.name,
                repr(float(row.ss)),
                repr(float(row.percent)),
                repr(float(row.dof)),
                repr(float(row.ms)),
                "" if row.f is None else repr(float(row.f)),
                "" if row.p is None else repr(float(row.p)),
            ]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Aligned, 4-significant-digit mirror of the table."""

        def fmt(x: float | None) -> str:
            if x is None:
                return ""
            if x == 0:
                return "0"
            if not np.isfinite(x):
                return "inf"
            return f"{x:.4g}"

        body = [["", *self.HEADER[1:]]]
        for row in self.all_rows():
            body.append(
                [row.name, fmt(row.ss), fmt(row.percent), fmt(row.dof), fmt(row.ms),
                 fmt(row.f), fmt(row.p)]
            )
        widths = [max(len(r[c]) for r in body) for c in range(len(body[0]))]
        lines = []
        for i, r in enumerate(body):
            cells = [r[0].ljust(widths[0])] + [
                v.rjust(widths[c + 1]) for c, v in enumerate(r[1:])
            ]
            lines.append("  ".join(cells).rstrip())
            if i == 0 or i == len(body) - 2:
                lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
        return "\n".join(lines) + "\n"


def build_asca_table(
    report: SsReport,
    f_values: Mapping[Term, float],
    p_values: Mapping[Term, float],
    spec: DesignSpec,
) -> AscaTable:
    """Assemble the standard decomposition/inference table from aligned inputs."""
    rows = []
    for term in report.terms:
        dof = dof_of_term(spec, term)
        rows.append(
            AscaTableRow(
                name=term.label,
                ss=report.ss[term],
                percent=report.percent(term),
                dof=dof,
                ms=report.ss[term] / dof if dof else 0.0,
                f=float(f_values[term]),
                p=float(p_values[term]),
            )
        )
    dof_res = residual_dof(spec)
    residual = AscaTableRow(
        name="Residuals",
        ss=report.residual_ss,
        percent=report.percent_residual,
        dof=dof_res,
        ms=report.residual_ss / dof_res if dof_res else 0.0,
    )
    dof_total = spec.n_samples - 1
    total = AscaTableRow(
        name="Total",
        ss=report.total_ss,
        percent=report.percent_total,
        dof=dof_total,
        ms=report.total_ss / dof_total if dof_total else 0.0,
    )
    return AscaTable(tuple(rows), residual, total)
