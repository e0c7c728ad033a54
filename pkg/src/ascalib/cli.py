"""Command-line front end.

Subcommands:
  fit    factorize, test and write the full artifact set
  sca    component outputs (scores/loadings/D-Q) for chosen terms
  power  simulated power curves over an effect-size or replicate grid
  check  residual assumption report only

A flat `key = value` config file can preload any flag; explicit flags win.
Errors exit nonzero with a machine-readable JSON record on stderr (exit 2 for
input/config problems, 1 for computation errors).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .design import Factor
from .errors import AscaError, ConfigError, CsvFormatError, FormulaError
from .inference import PermutationPlan
from .io import config_hash, read_config, write_csv
from .pipeline import (
    RunConfig,
    STRATEGY_ALIASES,
    check_assumptions,
    run_fit,
    run_pipeline,
)
from .power import GridAxis, SimulationScenario, UnitSpec, power_curve
from . import plots

_INPUT_ERRORS = (ConfigError, CsvFormatError, FormulaError)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--data", help="response CSV (sample id + numeric columns)")
    p.add_argument("--design", help="design CSV (sample id + factor level columns)")
    p.add_argument("--model", help="model formula, e.g. 'A + B + C(A) + A*B'")
    p.add_argument("--coding", choices=("sum", "reference", "weighted"))
    p.add_argument("--ss", choices=("simultaneous", "type1", "type2", "type3"))
    p.add_argument("--perms", type=int, help="number of permutations K")
    p.add_argument("--strategy", choices=("rows", "residual"))
    p.add_argument("--statistic", choices=("F", "SS", "MS", "EV"))
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--scale", choices=("mean_center", "autoscale", "reference_group"))
    p.add_argument("--scale-reference", help="Factor=level for reference_group scaling")
    p.add_argument("--transform", choices=("log", "sqrt", "box_cox", "rank"))
    p.add_argument("--impute",
                   choices=("drop_rows", "drop_cols", "unconditional_mean", "cell_mean"))
    p.add_argument("--exclude", help="comma list of sample ids and/or Factor=level")
    p.add_argument("--random", help="comma list of random factors")
    p.add_argument("--terms", help="component requests, e.g. 'Responder:1,Patient:2'")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--svg", action="store_true", default=None,
                   help="also render figures as SVG files")
    p.add_argument("--dump-x", action="store_true", default=None,
                   help="write the coded model matrix as model_matrix.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asca",
        description="ANOVA simultaneous component analysis of designed experiments",
    )
    parser.add_argument("--version", action="version", version=f"asca {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("fit", "run the full pipeline and write all artifacts"),
        ("sca", "write component outputs for the requested terms"),
        ("check", "write the residual assumption report only"),
        ("power", "simulate power curves for a planned design"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "power":
            p.add_argument("--factors",
                           help="crossed factors, e.g. 'A=a1,a2,a3;B=b1,b2'")
            p.add_argument("--unit", help="unit factor, e.g. 'Patient(Responder)'")
            p.add_argument("--grid",
                           help="'theta:TERM:v1,v2,...' or 'replicates:v1,v2,...'")
            p.add_argument("--effects", help="base effect sizes, e.g. 'A=1.0;A*B=0.5'")
            p.add_argument("--vars", type=int, help="simulated response count")
            p.add_argument("--replicates", type=int, help="base replicate count")
            p.add_argument("--datasets", type=int, help="datasets per grid point")
            p.add_argument("--heavy-tails", action="store_true", default=None,
                           help="draw noise from a heavy-tailed distribution")
    return parser


def _merge(args: argparse.Namespace) -> dict[str, str]:
    settings: dict[str, str] = {}
    if args.config:
        settings.update(read_config(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        settings[key.replace("_", "-")] = value
    return settings


def _split_list(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


def _parse_terms(text: str | None) -> tuple[tuple[str, int], ...]:
    out = []
    for chunk in _split_list(text):
        if ":" in chunk:
            label, _, r = chunk.partition(":")
            try:
                out.append((label.strip(), int(r)))
            except ValueError:
                raise ConfigError(f"bad component request {chunk!r}") from None
        else:
            out.append((chunk, 0))  # 0 = default component count
    return tuple(out)


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _run_config(settings: dict) -> RunConfig:
    for required in ("data", "design", "model", "out"):
        if required not in settings:
            raise ConfigError(f"missing required setting --{required}")
    return RunConfig(
        data_csv=str(settings["data"]),
        design_csv=str(settings["design"]),
        output_dir=str(settings["out"]),
        model=str(settings["model"]),
        coding=str(settings.get("coding", "sum")),
        ss=str(settings.get("ss", "simultaneous")),
        impute=settings.get("impute"),
        transform=settings.get("transform"),
        transform_lambda=settings.get("transform-lambda", "auto"),
        scale=settings.get("scale"),
        scale_reference=settings.get("scale-reference"),
        exclude=_split_list(settings.get("exclude")),
        random_factors=_split_list(settings.get("random")),
        perms=int(settings.get("perms", 999)),
        strategy=str(settings.get("strategy", "rows")),
        statistic=str(settings.get("statistic", "F")),
        seed=int(settings.get("seed", 0)),
        alpha=float(settings.get("alpha", 0.05)),
        sca=_parse_terms(settings.get("terms")),
        svg=_as_bool(settings.get("svg", False)),
        threads=int(settings.get("threads", 1)),
        dump_design_matrix=_as_bool(settings.get("dump-x", False)),
    )


def _parse_power_factors(text: str | None) -> tuple[Factor, ...]:
    if not text:
        raise ConfigError("power needs --factors, e.g. 'A=a1,a2,a3;B=b1,b2'")
    factors = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        name, _, levels = chunk.partition("=")
        levels_t = tuple(s.strip() for s in levels.split(",") if s.strip())
        if not name.strip() or len(levels_t) < 2:
            raise ConfigError(f"bad factor spec {chunk!r}")
        factors.append(Factor(name.strip(), levels_t))
    return tuple(factors)


def _parse_grid(text: str | None) -> GridAxis:
    if not text:
        raise ConfigError("power needs --grid 'theta:TERM:v1,v2,..' or 'replicates:v1,..'")
    parts = str(text).split(":")
    if parts[0] == "theta" and len(parts) == 3:
        values = tuple(float(v) for v in parts[2].split(",") if v.strip())
        return GridAxis("effect_size", values, term=parts[1].strip())
    if parts[0] == "replicates" and len(parts) == 2:
        values = tuple(float(v) for v in parts[1].split(",") if v.strip())
        return GridAxis("replicates", values)
    raise ConfigError(f"cannot parse grid spec {text!r}")


def _parse_effects(text: str | None) -> dict[str, float]:
    out: dict[str, float] = {}
    for chunk in str(text or "").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        label, _, value = chunk.partition("=")
        try:
            out[label.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"bad effect size {chunk!r}") from None
    return out


def _parse_unit(text: str | None, random_names: tuple[str, ...]) -> UnitSpec | None:
    if not text:
        return None
    import re

    m = re.match(r"^\s*([A-Za-z_]\w*)\s*\(\s*([A-Za-z_]\w*)\s*\)\s*$", str(text))
    if not m:
        raise ConfigError(f"bad unit spec {text!r}; expected 'Unit(Parent)'")
    nature = "random" if (not random_names or m.group(1) in random_names) else "fixed"
    return UnitSpec(m.group(1), m.group(2), nature=nature)


def _cmd_power(settings: dict) -> int:
    if "out" not in settings or "model" not in settings:
        raise ConfigError("power needs --model and --out")
    random_names = _split_list(settings.get("random"))
    scenario = SimulationScenario(
        factors=_parse_power_factors(settings.get("factors")),
        model=str(settings["model"]),
        grid=_parse_grid(settings.get("grid")),
        n_vars=int(settings.get("vars", 20)),
        n_datasets=int(settings.get("datasets", 200)),
        plan=PermutationPlan(
            strategy=STRATEGY_ALIASES.get(str(settings.get("strategy", "rows")),
                                          "unconstrained_rows"),
            n_permutations=int(settings.get("perms", 99)),
            seed=0,
            statistic=str(settings.get("statistic", "F")),
        ),
        master_seed=int(settings.get("seed", 0)),
        unit=_parse_unit(settings.get("unit"), random_names),
        effect_sizes=_parse_effects(settings.get("effects")),
        n_replicates=int(settings.get("replicates", 3)),
        alpha=float(settings.get("alpha", 0.05)),
        heavy_tails=_as_bool(settings.get("heavy-tails", False)),
    )
    curve = power_curve(scenario, n_workers=int(settings.get("threads", 1)))
    out = Path(str(settings["out"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "power_curve.csv").write_text(curve.to_csv_text(), encoding="utf-8")
    if _as_bool(settings.get("svg", False)):
        plots.save_power_plot(curve, str(out / "power_curve.svg"))
    manifest = {
        "command": "power",
        "seed": scenario.master_seed,
        "config_hash": config_hash(settings),
        "settings": {k: str(v) for k, v in settings.items()},
        "artifacts": ["power_curve.csv"] + (["power_curve.svg"] if _as_bool(
            settings.get("svg", False)) else []),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2),
                                           encoding="utf-8")
    print(f"power curve written to {out / 'power_curve.csv'}")
    return 0


def _cmd_check(settings: dict) -> int:
    config = _run_config(settings)
    from .coding import build_model_matrix
    from .glm import fit_ols
    from .pipeline import build_preprocess_plan, load_study
    from .prep import apply_plan

    spec, raw, _ = load_study(config)
    Y, _ = apply_plan(raw, spec, build_preprocess_plan(config))
    d = fit_ols(build_model_matrix(spec, config.coding), Y)
    report = check_assumptions(d, spec)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "assumptions_qq.csv", ["theoretical", "observed"],
              zip(report.qq_theoretical.tolist(), report.qq_observed.tolist()))
    rows = []
    for fname, levels in report.factor_level_q.items():
        for lev, values in levels.items():
            rows.extend([[fname, lev, float(v)] for v in values])
    write_csv(out / "assumptions_levels.csv", ["factor", "level", "q"], rows)
    write_csv(out / "assumptions_order.csv", ["index", "sample", "q"],
              [[i + 1, sid, float(q)] for i, (sid, q) in
               enumerate(zip(spec.sample_ids, report.order_q))])
    summary = {
        "qq_correlation": report.qq_correlation,
        "normality_p": report.normality_p,
        "normality_flag": report.normality_flag,
        "variance_ratio": report.variance_ratio,
        "variance_flag": report.variance_flag,
        "messages": list(report.messages),
    }
    (out / "assumptions_summary.json").write_text(json.dumps(summary, indent=2),
                                                  encoding="utf-8")
    if config.svg:
        plots.save_qq_plot(report.qq_theoretical, report.qq_observed,
                           str(out / "assumptions_qq.svg"))
        plots.save_residual_order_plot(report.order_q, str(out / "residual_order.svg"))
    for message in report.messages:
        print(f"warning: {message}", file=sys.stderr)
    print(f"assumption report written to {out}")
    return 0


def _cmd_fit(settings: dict) -> int:
    config = _run_config(settings)
    result, artifacts = run_pipeline(config)
    for message in result.warnings:
        print(f"warning: {message}", file=sys.stderr)
    print(result.table.to_text())
    print(f"{len(artifacts)} artifact(s) written to {config.output_dir}")
    return 0


def _cmd_sca(settings: dict) -> int:
    config = _run_config(settings)
    result = run_fit(config)
    if not result.sca_models:
        print("no significant terms and no --terms requested; nothing to write",
              file=sys.stderr)
    from .pipeline import _write_sca_artifacts  # same artifact layout as fit

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict = {}
    for label, model in result.sca_models.items():
        written.update(_write_sca_artifacts(out, label, model, result, config))
    for message in result.warnings:
        print(f"warning: {message}", file=sys.stderr)
    print(f"{len(written)} artifact(s) written to {config.output_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = _merge(args)
        if args.command == "fit":
            return _cmd_fit(settings)
        if args.command == "sca":
            return _cmd_sca(settings)
        if args.command == "check":
            return _cmd_check(settings)
        return _cmd_power(settings)
    except AscaError as exc:
        code = 2 if isinstance(exc, _INPUT_ERRORS) else 1
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        print(json.dumps(record), file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
                (Path(out) / "error.json").write_text(json.dumps(record, indent=2),
                                                      encoding="utf-8")
            except OSError:
                pass
        return code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
