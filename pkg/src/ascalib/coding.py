"""Coded model matrices: sum, reference and weighted coding with per-term spans."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Mapping

import numpy as np

from .design import DesignSpec, Term
from .errors import EstimabilityError, InvalidDesignError

SCHEMES = ("sum", "reference", "weighted")


@dataclass(frozen=True, eq=False)
class ModelMatrix:
    """Dense coded design matrix with contiguous column spans per term.

    ``level_patterns[term]`` holds, for main and nested terms, one coded row
    per factor level (aligned with ``level_labels[term]``); these patterns are
    what :func:`expand_constrained_effects` multiplies coefficients against to
    recover the constrained level's effect.
    """

    values: np.ndarray
    spans: Mapping[Term, slice]
    scheme: str
    column_names: tuple[str, ...]
    level_patterns: Mapping[Term, np.ndarray]
    level_labels: Mapping[Term, tuple[str, ...]]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def columns_of(self, term: Term) -> np.ndarray:
        return self.values[:, self.spans[term]]


def _baseline_index(factor, baselines) -> int:
    if baselines and factor.name in baselines:
        label = baselines[factor.name]
        if label not in factor.levels:
            raise InvalidDesignError(
                f"baseline {label!r} is not a level of factor {factor.name!r}"
            )
        return factor.levels.index(label)
    return 0


def _one_way_patterns(n_levels: int, baseline: int, scheme: str, counts=None) -> np.ndarray:
    """(G x G-1) coded row per level; columns follow declared order minus baseline."""
    cols = [g for g in range(n_levels) if g != baseline]
    pat = np.zeros((n_levels, len(cols)))
    for j, g in enumerate(cols):
        pat[g, j] = 1.0
        if scheme == "sum":
            pat[baseline, j] = -1.0
        elif scheme == "weighted":
            pat[baseline, j] = -counts[g] / counts[baseline]
        # reference: baseline row stays zero
    return pat


def _factor_block(spec: DesignSpec, name: str, scheme: str, baselines):
    """Columns, per-level patterns, labels and names for one factor's own term."""
    f = spec.factor(name)
    codes = spec.assignments[name]
    if f.nested_in is None:
        base = _baseline_index(f, baselines)
        counts = np.bincount(codes, minlength=f.n_levels)
        pat = _one_way_patterns(f.n_levels, base, scheme, counts)
        names = [f"{name}[{f.levels[g]}]" for g in range(f.n_levels) if g != base]
        return pat[codes], pat, f.levels, tuple(names)

    # Nested factor: one-way pattern within each parent level over its children.
    parent_of = spec.child_to_parent(name)
    parent = spec.factor(f.nested_in)
    counts = np.bincount(codes, minlength=f.n_levels)
    width = f.n_levels - parent.n_levels
    pat = np.zeros((f.n_levels, width))
    names: list[str] = []
    col = 0
    for p in range(parent.n_levels):
        children = [c for c in range(f.n_levels) if parent_of[c] == p]
        if not children:
            raise InvalidDesignError(
                f"parent level {parent.levels[p]!r} of {parent.name!r} has no "
                f"levels of nested factor {name!r}"
            )
        base = children[0]
        for child in children[1:]:
            pat[child, col] = 1.0
            if scheme == "sum":
                pat[base, col] = -1.0
            elif scheme == "weighted":
                pat[base, col] = -counts[child] / counts[base]
            names.append(f"{name}[{f.levels[child]}]")
            col += 1
    return pat[codes], pat, f.levels, tuple(names)


def _check_cells(spec: DesignSpec, term: Term) -> None:
    """Every level combination a term codes for must be observed at least once."""
    if len(term.factors) < 2:
        return  # single-factor level presence is enforced by DesignSpec
    cols = [spec.assignments[name] for name in term.factors]
    observed = {tuple(row) for row in np.stack(cols, axis=1)}
    sizes = [spec.factor(name).n_levels for name in term.factors]
    nested_pairs = {
        (i, term.factors.index(spec.factor(name).nested_in))
        for i, name in enumerate(term.factors)
        if spec.factor(name).nested_in in term.factors
    }
    parent_maps = {i: spec.child_to_parent(term.factors[i]) for i, _ in nested_pairs}
    for combo in product(*(range(s) for s in sizes)):
        if any(parent_maps[i][combo[i]] != combo[j] for i, j in nested_pairs):
            continue  # structurally impossible under nesting
        if combo not in observed:
            labels = ", ".join(
                f"{name}={spec.factor(name).levels[c]}"
                for name, c in zip(term.factors, combo)
            )
            raise EstimabilityError(
                f"empty design cell ({labels}) makes term {term.label!r} inestimable"
            )


def build_model_matrix(
    spec: DesignSpec,
    scheme: str = "sum",
    *,
    baselines: Mapping[str, str] | None = None,
) -> ModelMatrix:
    """Code the design into a dense matrix X with one contiguous span per term.

    The dropped/baseline level of each factor defaults to its first declared
    level (override via ``baselines``).  Interaction spans are element-wise
    products of the member factors' spans, first member's columns varying
    slowest.  Under weighted coding every main/nested column sums to zero over
    samples, restoring orthogonality to the intercept under imbalance.
    """
    if scheme not in SCHEMES:
        raise InvalidDesignError(f"unknown coding scheme {scheme!r}; pick one of {SCHEMES}")
    n = spec.n_samples
    blocks: list[np.ndarray] = [np.ones((n, 1))]
    names: list[str] = ["intercept"]
    spans: dict[Term, slice] = {spec.terms[0]: slice(0, 1)}
    level_patterns: dict[Term, np.ndarray] = {}
    level_labels: dict[Term, tuple[str, ...]] = {}

    factor_cache: dict[str, tuple] = {}

    def factor_block(name: str) -> tuple:
        if name not in factor_cache:
            factor_cache[name] = _factor_block(spec, name, scheme, baselines)
        return factor_cache[name]  # (columns, level patterns, level labels, column names)

    start = 1
    for term in spec.terms[1:]:
        _check_cells(spec, term)
        if term.kind in ("main", "nested"):
            cols, pat, labels, colnames = factor_block(term.factors[0])
            level_patterns[term] = pat
            level_labels[term] = tuple(labels)
        else:
            member_cols = [factor_block(name)[0] for name in term.factors]
            member_names = [factor_block(name)[3] for name in term.factors]
            widths = [c.shape[1] for c in member_cols]
            cols = np.ones((n, int(np.prod(widths))))
            colnames = []
            for j, combo in enumerate(product(*(range(w) for w in widths))):
                for block, k in zip(member_cols, combo):
                    cols[:, j] *= block[:, k]
                colnames.append("*".join(nm[k] for nm, k in zip(member_names, combo)))
            colnames = tuple(colnames)
        blocks.append(cols)
        names.extend(colnames)
        spans[term] = slice(start, start + cols.shape[1])
        start += cols.shape[1]

    X = np.concatenate(blocks, axis=1)
    X += 0.0  # normalize -0.0 from products so emitted matrices are literal
    X.setflags(write=False)
    return ModelMatrix(X, spans, scheme, tuple(names), level_patterns, level_labels)


def expand_constrained_effects(
    mm: ModelMatrix, term: Term, estimated: np.ndarray
) -> np.ndarray:
    """Recover per-level effects of a main/nested term from its coefficients.

    Under sum coding the constrained level's effect is minus the sum of the
    estimated ones; under reference coding it is zero; under weighted coding
    it carries the replicate-count weights.  ``estimated`` may be a vector
    (one response) or a (span_width x n_vars) block.
    """
    if term not in mm.level_patterns:
        raise InvalidDesignError(
            f"per-level effects are only defined for main/nested terms, not {term.label!r}"
        )
    estimated = np.asarray(estimated, dtype=float)
    pat = mm.level_patterns[term]
    if estimated.shape[0] != pat.shape[1]:
        raise InvalidDesignError(
            f"expected {pat.shape[1]} coefficients for term {term.label!r}, "
            f"got {estimated.shape[0]}"
        )
    return pat @ estimated
