"""Simulated power curves for experiment planning.

A scenario describes a design template (crossed factors, optionally one
nested unit factor such as subjects within a grouping), planted effect sizes
and an inference plan.  Power is the Monte Carlo fraction of simulated
datasets whose permutation p-value falls at or below the significance level,
swept over an effect-size or replicate-count grid.

Planted effects are cell-wise constant patterns drawn in the orthonormalized
column space of the term's coded span and scaled to unit norm, so an effect
size of theta plants exactly theta^2 sum of squares.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .coding import ModelMatrix, build_model_matrix
from .design import DesignSpec, Factor, Term, parse_model_formula
from .errors import InvalidDesignError
from .glm import ResponseMatrix
from .inference import PermutationPlan, permutation_test
from .prep import PreprocessPlan, RawResponseMatrix, apply_plan

GRID_KINDS = ("effect_size", "replicates")


@dataclass(frozen=True)
class UnitSpec:
    """A random unit factor (e.g. subjects) nested in one crossed factor."""

    name: str
    nested_in: str
    nature: str = "random"


@dataclass(frozen=True, eq=False)
class GridAxis:
    kind: str
    values: tuple[float, ...]
    term: str | None = None  # which term's effect size the grid sweeps

    def __post_init__(self) -> None:
        if self.kind not in GRID_KINDS:
            raise InvalidDesignError(f"grid kind must be one of {GRID_KINDS}")
        if not self.values:
            raise InvalidDesignError("grid axis needs at least one value")
        if self.kind == "effect_size" and not self.term:
            raise InvalidDesignError("an effect-size grid must name the swept term")
        if self.kind == "replicates":
            if any(v < 2 for v in self.values):
                raise InvalidDesignError("replicate counts must be >= 2")
            if any(float(v) != int(v) for v in self.values):
                raise InvalidDesignError("replicate counts must be whole numbers")


@dataclass(frozen=True, eq=False)
class SimulationScenario:
    """Everything needed to simulate and test datasets reproducibly."""

    factors: tuple[Factor, ...]
    model: str
    grid: GridAxis
    n_vars: int
    n_datasets: int
    plan: PermutationPlan
    master_seed: int
    unit: UnitSpec | None = None
    effect_sizes: Mapping[str, float] = field(default_factory=dict)
    n_replicates: int = 3
    alpha: float = 0.05
    heavy_tails: bool = False
    preprocess: PreprocessPlan | None = None

    def __post_init__(self) -> None:
        if self.n_vars < 1 or self.n_datasets < 1:
            raise InvalidDesignError("n_vars and n_datasets must be positive")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidDesignError("significance level must lie in (0, 1)")
        if any(v < 0 for v in self.effect_sizes.values()):
            raise InvalidDesignError("effect sizes must be >= 0")
        if self.unit is not None and self.unit.nested_in not in {
            f.name for f in self.factors
        }:
            raise InvalidDesignError(
                f"unit factor {self.unit.name!r} nests in unknown factor "
                f"{self.unit.nested_in!r}"
            )


def build_design(scenario: SimulationScenario, n_replicates: int) -> DesignSpec:
    """Design table for one grid point: full factorial, plus optional units.

    Without a unit factor, every combination of factor levels is replicated
    ``n_replicates`` times.  With one, ``n_replicates`` units are generated
    per level of the parent factor and each unit is crossed with the
    remaining factors (a repeated-measures layout).
    """
    crossed = list(scenario.factors)
    if scenario.unit is None:
        combos: list[tuple[str, ...]] = [()]
        for f in crossed:
            combos = [c + (lev,) for c in combos for lev in f.levels]
        table = {f.name: [] for f in crossed}
        ids = []
        for combo in combos:
            for r in range(n_replicates):
                ids.append(f"s{len(ids) + 1:04d}")
                for f, lev in zip(crossed, combo):
                    table[f.name].append(lev)
        factors = tuple(crossed)
    else:
        unit = scenario.unit
        parent = next(f for f in crossed if f.name == unit.nested_in)
        others = [f for f in crossed if f.name != unit.nested_in]
        unit_levels = [
            f"{plev}_u{r + 1}" for plev in parent.levels for r in range(n_replicates)
        ]
        unit_factor = Factor(
            unit.name, tuple(unit_levels), nature=unit.nature, nested_in=parent.name
        )
        combos = [()]
        for f in others:
            combos = [c + (lev,) for c in combos for lev in f.levels]
        table = {f.name: [] for f in crossed}
        table[unit.name] = []
        ids = []
        for plev in parent.levels:
            for r in range(n_replicates):
                ulev = f"{plev}_u{r + 1}"
                for combo in combos:
                    ids.append(f"s{len(ids) + 1:04d}")
                    table[parent.name].append(plev)
                    table[unit.name].append(ulev)
                    for f, lev in zip(others, combo):
                        table[f.name].append(lev)
        factors = tuple(crossed) + (unit_factor,)
    terms = parse_model_formula(scenario.model, factors)
    return DesignSpec.from_table(factors, terms, table, sample_ids=ids)


def _resolve_point(scenario: SimulationScenario, grid_value: float):
    thetas = dict(scenario.effect_sizes)
    if scenario.grid.kind == "effect_size":
        thetas[scenario.grid.term] = float(grid_value)
        return scenario.n_replicates, thetas
    return int(grid_value), thetas


def _dataset_rng(scenario: SimulationScenario, grid_index: int, dataset_index: int):
    ss = np.random.SeedSequence(
        scenario.master_seed, spawn_key=(grid_index, dataset_index)
    )
    return np.random.Generator(np.random.Philox(ss))


def _planted_pattern(
    mm: ModelMatrix, term: Term, n_vars: int, rng: np.random.Generator
) -> np.ndarray:
    """Unit-norm, cell-wise constant pattern inside the term's coded span."""
    span_cols = mm.columns_of(term)
    basis, _ = np.linalg.qr(span_cols)
    weights = rng.standard_normal((basis.shape[1], n_vars))
    pattern = basis @ weights
    norm = np.linalg.norm(pattern)
    if norm == 0.0:  # pragma: no cover - zero-probability draw
        pattern = basis @ np.ones((basis.shape[1], n_vars))
        norm = np.linalg.norm(pattern)
    return pattern / norm


def simulate_dataset(
    scenario: SimulationScenario, grid_index: int, dataset_index: int
) -> tuple[DesignSpec, ModelMatrix, ResponseMatrix, int]:
    """One reproducible dataset for a grid point; returns a derived test seed."""
    grid_value = scenario.grid.values[grid_index]
    n_replicates, thetas = _resolve_point(scenario, grid_value)
    spec = build_design(scenario, n_replicates)
    mm = build_model_matrix(spec, "sum")
    rng = _dataset_rng(scenario, grid_index, dataset_index)
    n = spec.n_samples
    Y = np.zeros((n, scenario.n_vars))
    for term in spec.terms[1:]:
        theta = thetas.get(term.label, 0.0)
        if theta > 0.0:
            Y += theta * _planted_pattern(mm, term, scenario.n_vars, rng)
    if scenario.heavy_tails:
        Y += rng.standard_t(3, size=(n, scenario.n_vars))
    else:
        Y += rng.standard_normal((n, scenario.n_vars))
    test_seed = int(rng.integers(0, 2**63))
    variables = tuple(f"v{j + 1}" for j in range(scenario.n_vars))
    return spec, mm, ResponseMatrix(Y, variables, spec.sample_ids), test_seed


@dataclass(eq=False)
class PowerCurve:
    """Rejection fractions with binomial standard errors over the grid."""

    axis: str
    grid: tuple[float, ...]
    term_labels: tuple[str, ...]
    power: np.ndarray    # n_grid x n_terms
    stderr: np.ndarray
    completed: tuple[bool, ...]
    n_datasets: int
    alpha: float

    def to_csv_text(self) -> str:
        lines = [f"{self.axis},term,power,stderr,completed"]
        for i, g in enumerate(self.grid):
            for j, label in enumerate(self.term_labels):
                lines.append(
                    f"{float(g)!r},{label},{float(self.power[i, j])!r},"
                    f"{float(self.stderr[i, j])!r},{int(self.completed[i])}"
                )
        return "\n".join(lines) + "\n"


def _one_dataset(scenario: SimulationScenario, grid_index: int, dataset_index: int):
    spec, mm, Y, test_seed = simulate_dataset(scenario, grid_index, dataset_index)
    if scenario.preprocess is not None:
        raw = RawResponseMatrix(Y.values, Y.variables, Y.sample_ids)
        Y, _ = apply_plan(raw, spec, scenario.preprocess)
    plan = PermutationPlan(
        strategy=scenario.plan.strategy,
        n_permutations=scenario.plan.n_permutations,
        seed=test_seed,
        statistic=scenario.plan.statistic,
    )
    result = permutation_test(plan, spec, mm, Y)
    return [result.p_values[t] <= scenario.alpha for t in result.terms]


def power_curve(
    scenario: SimulationScenario,
    *,
    n_workers: int = 1,
    time_budget_s: float | None = None,
) -> PowerCurve:
    """Sweep the grid; each point aggregates ``n_datasets`` simulated studies.

    With a time budget, later grid points may be skipped; they are flagged as
    incomplete rather than silently dropped.  Results are independent of
    ``n_workers`` because every dataset derives its own seed from
    (master seed, grid index, dataset index).
    """
    started = time.monotonic()
    template = build_design(scenario, _resolve_point(scenario, scenario.grid.values[0])[0])
    term_labels = tuple(t.label for t in template.terms[1:])
    n_grid = len(scenario.grid.values)
    power = np.full((n_grid, len(term_labels)), np.nan)
    stderr = np.full_like(power, np.nan)
    completed = []
    for gi in range(n_grid):
        if time_budget_s is not None and time.monotonic() - started > time_budget_s:
            completed.append(False)
            continue
        if n_workers > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                rejections = list(
                    pool.map(lambda d: _one_dataset(scenario, gi, d),
                             range(scenario.n_datasets))
                )
        else:
            rejections = [
                _one_dataset(scenario, gi, d) for d in range(scenario.n_datasets)
            ]
        frac = np.mean(np.asarray(rejections, dtype=float), axis=0)
        power[gi] = frac
        stderr[gi] = np.sqrt(frac * (1.0 - frac) / scenario.n_datasets)
        completed.append(True)
    return PowerCurve(
        axis=scenario.grid.kind,
        grid=tuple(float(v) for v in scenario.grid.values),
        term_labels=term_labels,
        power=power,
        stderr=stderr,
        completed=tuple(completed),
        n_datasets=scenario.n_datasets,
        alpha=scenario.alpha,
    )
