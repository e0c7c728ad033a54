"""Batch pipeline: curation, preprocessing, factorization, checks, inference,
and visualization data, with all artifacts written as files.

The order mirrors how these analyses are run in practice: resolve missing
values and exclusions first, preprocess, fit, check residual assumptions
(warnings, never hard failures), then permutation inference and component
outputs.  A manifest records the seed and a hash of the configuration so a
run can be reproduced byte for byte (timestamps aside).
"""

from __future__ import annotations

import json
import re
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as sp_stats

from . import io as aio
from . import plots
from .design import (
    DesignSpec,
    Factor,
    Term,
    dof_of_term,
    parse_model_formula,
)
from .errors import ConfigError, DegenerateDataError, PreprocessError
from .glm import Decomposition, ResponseMatrix, fit_ols, sum_of_squares
from .coding import build_model_matrix
from .inference import (
    AscaTable,
    PermutationPlan,
    PermutationResult,
    build_asca_table,
    f_ratio,
    permutation_test,
)
from .prep import PreprocessPlan, RawResponseMatrix, apply_plan
from .sca import ScaModel, dq_statistics, fit_sca

STRATEGY_ALIASES = {
    "rows": "unconstrained_rows",
    "residual": "residual_reduced_model",
    "unconstrained_rows": "unconstrained_rows",
    "residual_reduced_model": "residual_reduced_model",
}
SS_ALIASES = {
    "simultaneous": "simultaneous",
    "type1": "type1",
    "type2": "type2",
    "type3": "type3",
}
VARIANCE_RATIO_LIMIT = 4.0
NORMALITY_P_LIMIT = 0.01


@dataclass(frozen=True, eq=False)
class RunConfig:
    """One batch run: paths, model, coding/SS choices, plans and requests."""

    data_csv: str
    design_csv: str
    output_dir: str
    model: str
    coding: str = "sum"
    ss: str = "simultaneous"
    impute: str | None = None
    impute_threshold: float = 0.0
    transform: str | None = None
    transform_lambda: float | str | None = "auto"
    scale: str | None = None
    scale_reference: str | None = None  # "Factor=level" for reference_group
    exclude: tuple[str, ...] = ()
    random_factors: tuple[str, ...] = ()
    perms: int = 999
    strategy: str = "rows"
    statistic: str = "F"
    seed: int = 0
    alpha: float = 0.05
    sca: tuple[tuple[str, int], ...] = ()  # (term label, components)
    svg: bool = False
    threads: int = 1
    dump_design_matrix: bool = False

    def settings(self) -> dict:
        return asdict(self)


def _strategy(name: str) -> str:
    if name not in STRATEGY_ALIASES:
        raise ConfigError(f"unknown permutation strategy {name!r}")
    return STRATEGY_ALIASES[name]


def _nesting_from_formula(model: str) -> dict[str, str]:
    nesting: dict[str, str] = {}
    for child, parent in re.findall(r"([A-Za-z_]\w*)\s*\(\s*([A-Za-z_]\w*)\s*\)", model):
        if nesting.get(child, parent) != parent:
            raise ConfigError(f"factor {child!r} declared nested in two parents")
        nesting[child] = parent
    return nesting


def _factor_names_from_formula(model: str) -> list[str]:
    names: list[str] = []
    for chunk in model.split("+"):
        for atom in chunk.split("*"):
            m = re.match(r"\s*([A-Za-z_]\w*)", atom)
            if not m:
                raise ConfigError(f"cannot read a factor name from {atom!r}")
            if m.group(1) not in names:
                names.append(m.group(1))
            inner = re.search(r"\(\s*([A-Za-z_]\w*)\s*\)", atom)
            if inner and inner.group(1) not in names:
                names.append(inner.group(1))
    return names


def _apply_exclusions(
    exclude: Sequence[str],
    sample_ids: Sequence[str],
    columns: Mapping[str, list[str]],
) -> tuple[np.ndarray, list]:
    from .prep import ImputationAction

    keep = np.ones(len(sample_ids), dtype=bool)
    for token in exclude:
        token = token.strip()
        if not token:
            continue
        if "=" in token:
            name, _, level = token.partition("=")
            name, level = name.strip(), level.strip()
            if name not in columns:
                raise ConfigError(f"exclusion {token!r}: no factor column {name!r}")
            hits = np.array([v == level for v in columns[name]])
            if not hits.any():
                raise ConfigError(f"exclusion {token!r}: level never occurs")
            keep &= ~hits
        else:
            if token not in sample_ids:
                raise ConfigError(f"exclusion {token!r}: no such sample id")
            keep &= np.array([sid != token for sid in sample_ids])
    if not keep.any():
        raise ConfigError("exclusion list removes every sample")
    actions = [
        ImputationAction(sample_ids[i], "*", "excluded")
        for i in np.flatnonzero(~keep)
    ]
    return keep, actions


def load_study(
    config: RunConfig,
    *,
    pre_hook=None,
) -> tuple[DesignSpec, RawResponseMatrix, list]:
    """Read and align the data/design CSVs, apply exclusions, build the spec.

    ``pre_hook`` is an optional callable applied to the raw matrix right after
    loading (the seam for externally supplied row-wise normalizations); it
    must return a RawResponseMatrix with unchanged sample ids.
    """
    raw = aio.read_data_csv(config.data_csv)
    if pre_hook is not None:
        hooked = pre_hook(raw)
        if tuple(hooked.sample_ids) != tuple(raw.sample_ids):
            raise ConfigError("pre_hook must not reorder or drop samples")
        raw = hooked
    design_ids, columns = aio.read_design_csv(config.design_csv)
    columns = aio.align_design_to_data(raw.sample_ids, design_ids, columns)

    names = _factor_names_from_formula(config.model)
    for name in names:
        if name not in columns:
            raise ConfigError(f"design CSV has no column for factor {name!r}")
    nesting = _nesting_from_formula(config.model)
    for name in config.random_factors:
        if name not in names:
            raise ConfigError(f"random factor {name!r} does not appear in the model")

    keep, exclusion_actions = _apply_exclusions(config.exclude, raw.sample_ids, columns)
    values = raw.values[keep]
    sample_ids = tuple(s for s, k in zip(raw.sample_ids, keep) if k)
    columns = {n: [v for v, k in zip(col, keep) if k] for n, col in columns.items()}
    raw = RawResponseMatrix(values, raw.variables, sample_ids)

    factors = []
    for name in names:
        levels = tuple(dict.fromkeys(columns[name]))
        factors.append(
            Factor(
                name,
                levels,
                nature="random" if name in config.random_factors else "fixed",
                nested_in=nesting.get(name),
            )
        )
    terms = parse_model_formula(config.model, factors)
    table = {name: columns[name] for name in names}
    spec = DesignSpec.from_table(factors, terms, table, sample_ids=sample_ids)
    return spec, raw, exclusion_actions


def build_preprocess_plan(config: RunConfig) -> PreprocessPlan:
    scale_params: dict = {}
    if config.scale == "reference_group":
        if not config.scale_reference or "=" not in config.scale_reference:
            raise ConfigError("reference_group scaling needs `Factor=level`")
        fac, _, lev = config.scale_reference.partition("=")
        scale_params = {"factor": fac.strip(), "level": lev.strip()}
    plan = PreprocessPlan.standard(
        impute_method=config.impute,
        transform_method=config.transform,
        scale_method=config.scale,
        **scale_params,
    )
    steps = []
    for step in plan.steps:
        if step.kind == "impute" and config.impute_threshold:
            steps.append(type(step)(step.kind, step.method,
                                    {"max_missing_frac": config.impute_threshold}))
        elif step.kind == "transform" and step.method == "box_cox":
            steps.append(type(step)(step.kind, step.method,
                                    {"lmbda": config.transform_lambda}))
        else:
            steps.append(step)
    return PreprocessPlan(tuple(steps))


# -- assumption checks ---------------------------------------------------------


@dataclass(eq=False)
class AssumptionReport:
    """Residual diagnostics: Q-Q data, per-level spread, order series, flags."""

    qq_theoretical: np.ndarray
    qq_observed: np.ndarray
    qq_correlation: float
    normality_p: float | None
    normality_flag: bool
    variance_ratio: float
    variance_flag: bool
    factor_level_q: dict[str, dict[str, np.ndarray]]
    order_q: np.ndarray
    messages: tuple[str, ...]


def check_assumptions(d: Decomposition, spec: DesignSpec) -> AssumptionReport:
    """Exchangeability-oriented residual diagnostics; flags warn, never fail."""
    from .glm import decomposition_scale, negligible_ss

    E = d.residuals
    pooled = E.ravel()
    n_pool = pooled.size
    sd = pooled.std()
    trivially_zero = negligible_ss(float(np.sum(E * E)), decomposition_scale(d))
    messages: list[str] = []

    if trivially_zero or sd == 0.0:
        theo = obs = np.zeros(min(n_pool, 512))
        qq_corr, norm_p, norm_flag = 1.0, None, False
    else:
        std = np.sort(pooled / sd)
        if n_pool > 2048:  # thin deterministically, Q-Q shape is preserved
            idx = np.linspace(0, n_pool - 1, 2048).round().astype(int)
            std = std[idx]
        probs = (np.arange(1, len(std) + 1) - 0.5) / len(std)
        theo = sp_stats.norm.ppf(probs)
        obs = std
        qq_corr = float(np.corrcoef(theo, obs)[0, 1])
        if n_pool >= 20:
            _, norm_p = sp_stats.normaltest(pooled)
            norm_p = float(norm_p)
            norm_flag = norm_p < NORMALITY_P_LIMIT
        else:
            norm_p, norm_flag = None, False
        if norm_flag:
            messages.append(
                f"residuals deviate from normality (omnibus p={norm_p:.2e}); "
                "permutation inference remains valid under exchangeability"
            )

    # Residual spread compared across the levels of each factor (the same
    # grouping the box-plot data uses); full cells are often singletons and
    # their per-cell mean squares would flag pure noise.
    variance_ratio = 1.0
    for f in spec.factors if not trivially_zero else ():
        codes = spec.assignments[f.name]
        level_ms = np.array(
            [float(np.mean(E[codes == i] ** 2)) for i in range(f.n_levels)]
        )
        if level_ms.max() == 0.0:
            continue
        ratio = float("inf") if level_ms.min() == 0.0 else float(
            level_ms.max() / level_ms.min()
        )
        variance_ratio = max(variance_ratio, ratio)
    variance_flag = variance_ratio > VARIANCE_RATIO_LIMIT
    if variance_flag:
        messages.append(
            f"residual spread differs across factor levels (max/min mean square "
            f"{variance_ratio:.1f}); consider a transform or reference scaling"
        )

    q = np.sum(E * E, axis=1)
    factor_level_q = {
        f.name: {
            lev: q[spec.assignments[f.name] == i] for i, lev in enumerate(f.levels)
        }
        for f in spec.factors
    }
    return AssumptionReport(
        qq_theoretical=np.asarray(theo),
        qq_observed=np.asarray(obs),
        qq_correlation=qq_corr,
        normality_p=norm_p,
        normality_flag=norm_flag,
        variance_ratio=variance_ratio,
        variance_flag=variance_flag,
        factor_level_q=factor_level_q,
        order_q=q,
        messages=tuple(messages),
    )


def _all_factor_cells(spec: DesignSpec) -> np.ndarray:
    cols = [spec.assignments[f.name] for f in spec.factors]
    _, inverse = np.unique(np.stack(cols, axis=1), axis=0, return_inverse=True)
    return inverse


# -- pipeline ----------------------------------------------------------------


@dataclass(eq=False)
class FitResult:
    spec: DesignSpec
    Y: ResponseMatrix
    decomposition: Decomposition
    report: object
    permutation: PermutationResult
    table: AscaTable
    assumptions: AssumptionReport
    curation_actions: list
    sca_models: dict[str, ScaModel] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


def run_fit(config: RunConfig, *, pre_hook=None) -> FitResult:
    """Library-level pipeline run; raises AscaError subclasses on failure."""
    if config.ss not in SS_ALIASES:
        raise ConfigError(f"unknown SS convention {config.ss!r}")
    spec, raw, curation = load_study(config, pre_hook=pre_hook)
    plan = build_preprocess_plan(config)
    if raw.missing_mask.any() and not any(s.kind == "impute" for s in plan.steps):
        raise PreprocessError(
            "data has missing values (NA tokens); pick an imputation method"
        )
    caught: list[str] = []
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        Y, actions = apply_plan(raw, spec, plan)
        caught.extend(str(w.message) for w in wlist)
    curation = curation + actions
    if Y.n_samples != spec.n_samples:
        raise PreprocessError(
            "row-dropping imputation changed the sample set; rerun with those "
            "samples in --exclude so the design stays aligned"
        )

    mm = build_model_matrix(spec, config.coding)
    d = fit_ols(mm, Y)
    report = sum_of_squares(d, mm, Y, SS_ALIASES[config.ss], spec=spec)
    assumptions = check_assumptions(d, spec)
    caught.extend(assumptions.messages)

    perm_plan = PermutationPlan(
        strategy=_strategy(config.strategy),
        n_permutations=config.perms,
        seed=config.seed,
        statistic=config.statistic,
    )
    perm = permutation_test(perm_plan, spec, mm, Y)
    # Table F values are design-aware ratios from the fitted report; they
    # coincide with the observed permutation statistic when that statistic is F.
    f_values = {t: f_ratio(report, spec, t) for t in report.terms}
    table = build_asca_table(report, f_values, perm.p_values, spec)

    result = FitResult(
        spec=spec,
        Y=Y,
        decomposition=d,
        report=report,
        permutation=perm,
        table=table,
        assumptions=assumptions,
        curation_actions=curation,
        warnings=tuple(caught),
    )
    for label, r in _sca_requests(config, spec, perm):
        term = spec.term_by_label(label)
        if perm.p_values[term] > config.alpha:
            result.warnings += (
                f"term {label!r} is not significant (p={perm.p_values[term]:.3g}); "
                "its component plot should not be over-read",
            )
        try:
            result.sca_models[label] = fit_sca(d, term, r, spec)
        except DegenerateDataError as exc:
            result.warnings += (f"skipping components of {label!r}: {exc}",)
    return result


def _sca_requests(config: RunConfig, spec: DesignSpec, perm: PermutationResult):
    if config.sca:
        out = []
        for label, r in config.sca:
            term = spec.term_by_label(label)
            out.append((label, r if r > 0 else min(2, dof_of_term(spec, term))))
        return out
    # Default: every significant term, at most two components each.
    out = []
    for term in perm.terms:
        if perm.p_values[term] <= config.alpha:
            out.append((term.label, min(2, dof_of_term(spec, term))))
    return out


def _slug(label: str) -> str:
    return label.replace("*", "x").replace("(", "_").replace(")", "")


def _term_groups(spec: DesignSpec, term: Term) -> list[str]:
    labels = []
    for i in range(spec.n_samples):
        parts = [
            spec.factor(name).levels[spec.assignments[name][i]] for name in term.factors
        ]
        labels.append("/".join(parts))
    return labels


def write_fit_artifacts(result: FitResult, config: RunConfig) -> dict[str, Path]:
    """Emit tables, diagnostics, component CSVs and optional figures."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, Path] = {}

    table_csv = out / "asca_table.csv"
    table_csv.write_text(result.table.to_csv_text(), encoding="utf-8")
    artifacts["asca_table.csv"] = table_csv
    table_txt = out / "asca_table.txt"
    table_txt.write_text(result.table.to_text(), encoding="utf-8")
    artifacts["asca_table.txt"] = table_txt

    spec = result.spec
    rows = []
    for i, sid in enumerate(spec.sample_ids):
        row = [sid, float(result.assumptions.order_q[i])]
        row += [f.levels[spec.assignments[f.name][i]] for f in spec.factors]
        rows.append(row)
    artifacts["residual_diagnostics.csv"] = aio.write_csv(
        out / "residual_diagnostics.csv",
        ["sample", "q"] + [f.name for f in spec.factors],
        rows,
    )

    artifacts["assumptions_qq.csv"] = aio.write_csv(
        out / "assumptions_qq.csv",
        ["theoretical", "observed"],
        zip(
            result.assumptions.qq_theoretical.tolist(),
            result.assumptions.qq_observed.tolist(),
        ),
    )
    level_rows = []
    for fname, levels in result.assumptions.factor_level_q.items():
        for lev, values in levels.items():
            for v in values:
                level_rows.append([fname, lev, float(v)])
    artifacts["assumptions_levels.csv"] = aio.write_csv(
        out / "assumptions_levels.csv", ["factor", "level", "q"], level_rows
    )
    summary = {
        "qq_correlation": result.assumptions.qq_correlation,
        "normality_p": result.assumptions.normality_p,
        "normality_flag": result.assumptions.normality_flag,
        "variance_ratio": result.assumptions.variance_ratio,
        "variance_flag": result.assumptions.variance_flag,
        "messages": list(result.assumptions.messages),
    }
    summary_path = out / "assumptions_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    artifacts["assumptions_summary.json"] = summary_path

    if result.curation_actions:
        artifacts["curation_report.csv"] = aio.write_csv(
            out / "curation_report.csv",
            ["sample", "variable", "action"],
            [[a.sample_id, a.variable, a.action] for a in result.curation_actions],
        )

    if config.dump_design_matrix:
        mm = build_model_matrix(result.spec, config.coding)
        artifacts["model_matrix.csv"] = aio.write_csv(
            out / "model_matrix.csv",
            ["sample", *mm.column_names],
            [[sid, *map(float, mm.values[i])]
             for i, sid in enumerate(result.spec.sample_ids)],
        )

    for label, model in result.sca_models.items():
        artifacts.update(_write_sca_artifacts(out, label, model, result, config))

    if config.svg:
        artifacts["assumptions_qq.svg"] = Path(
            plots.save_qq_plot(
                result.assumptions.qq_theoretical,
                result.assumptions.qq_observed,
                str(out / "assumptions_qq.svg"),
            )
        )
        artifacts["residual_order.svg"] = Path(
            plots.save_residual_order_plot(
                result.assumptions.order_q, str(out / "residual_order.svg")
            )
        )
        for f in spec.factors:
            name = f"residual_box_{f.name}.svg"
            artifacts[name] = Path(
                plots.save_residual_box_plot(
                    result.assumptions.factor_level_q[f.name],
                    str(out / name),
                    factor_name=f.name,
                )
            )

    manifest = {
        "command": "fit",
        "seed": config.seed,
        "config_hash": aio.config_hash(config.settings()),
        "settings": config.settings(),
        "n_samples": result.spec.n_samples,
        "n_vars": result.Y.n_vars,
        "permutations_used": result.permutation.n_used,
        "exact_enumeration": result.permutation.exact,
        "warnings": list(result.warnings),
        "artifacts": sorted(artifacts),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest_path = out / "run_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    artifacts["run_manifest.json"] = manifest_path
    return artifacts


def _write_sca_artifacts(
    out: Path, label: str, model: ScaModel, result: FitResult, config: RunConfig
) -> dict[str, Path]:
    artifacts: dict[str, Path] = {}
    spec = result.spec
    slug = _slug(label)
    groups = _term_groups(spec, model.term)
    r = model.n_components

    score_rows = []
    for i, sid in enumerate(spec.sample_ids):
        score_rows.append(
            [sid]
            + [float(v) for v in model.scores[i]]
            + [float(v) for v in model.augmented_scores[i]]
            + [groups[i]]
        )
    header = (
        ["sample"]
        + [f"score_{k + 1}" for k in range(r)]
        + [f"augmented_{k + 1}" for k in range(r)]
        + ["group"]
    )
    artifacts[f"sca_{slug}_scores.csv"] = aio.write_csv(
        out / f"sca_{slug}_scores.csv", header, score_rows
    )

    loading_rows = [
        [var] + [float(v) for v in model.loadings[j]]
        for j, var in enumerate(result.Y.variables)
    ]
    artifacts[f"sca_{slug}_loadings.csv"] = aio.write_csv(
        out / f"sca_{slug}_loadings.csv",
        ["variable"] + [f"loading_{k + 1}" for k in range(r)],
        loading_rows,
    )

    augmentation = (
        result.decomposition.residuals
        if model.augmentation_term.kind == "residual"
        else result.decomposition.effects[model.augmentation_term]
    )
    d_stat, q_stat = dq_statistics(model, augmentation)
    artifacts[f"sca_{slug}_dq.csv"] = aio.write_csv(
        out / f"sca_{slug}_dq.csv",
        ["sample", "d", "q", "group"],
        [
            [sid, float(d_stat[i]), float(q_stat[i]), groups[i]]
            for i, sid in enumerate(spec.sample_ids)
        ],
    )

    scree_rows = [
        [k + 1, float(s)] for k, s in enumerate(model.singular_values)
    ]
    artifacts[f"sca_{slug}_scree.csv"] = aio.write_csv(
        out / f"sca_{slug}_scree.csv", ["component", "singular_value"], scree_rows
    )

    if config.svg:
        artifacts[f"sca_{slug}_scores.svg"] = Path(
            plots.save_scores_plot(
                model.augmented_scores, groups, str(out / f"sca_{slug}_scores.svg"),
                title=f"{label} (augmented by {model.augmentation_term.label})",
            )
        )
        artifacts[f"sca_{slug}_loadings.svg"] = Path(
            plots.save_loadings_plot(
                model.loadings, result.Y.variables,
                str(out / f"sca_{slug}_loadings.svg"), title=label,
            )
        )
        artifacts[f"sca_{slug}_dq.svg"] = Path(
            plots.save_dq_plot(
                d_stat, q_stat, str(out / f"sca_{slug}_dq.svg"), groups=groups,
                title=f"{label} D vs Q",
            )
        )
        artifacts[f"sca_{slug}_scree.svg"] = Path(
            plots.save_scree_plot(
                model.singular_values, str(out / f"sca_{slug}_scree.svg"), title=label
            )
        )
    return artifacts


def run_pipeline(config: RunConfig) -> tuple[FitResult, dict[str, Path]]:
    """Run the full batch pipeline and write every artifact."""
    result = run_fit(config)
    artifacts = write_fit_artifacts(result, config)
    return result, artifacts
