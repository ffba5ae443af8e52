"""Command-line interface tying ingestion, fitting, validation, and reporting
into reproducible batch runs.

Every command parses and validates all inputs before any sampling starts,
derives its randomness from one resolved seed, and writes a manifest with
input hashes so a rerun can be checked byte for byte. Report commands render
PNG figures next to the plot-ready CSVs; pass --no-figures to skip them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from fp_estim import __version__
from fp_estim.core import (
    DataType,
    ObservationKind,
    ParseError,
    PopulationGroup,
    derive_seed,
    rate_of_change,
)
from fp_estim.countryfit import (
    MODE_SURVEY_EMU,
    MODE_SURVEY_ONLY,
    MODES,
    CountryFitResult,
    MissingEmuError,
    NoSurveyDataError,
    SelectionError,
    attach_emu,
    fit_country,
    read_emu_csv,
    read_estimates_csv,
    read_surveys_csv,
    write_diagnostics_json,
    write_estimates_csv,
)
from fp_estim.hypertrain import (
    IdentifiabilityError,
    JoinError,
    default_hyperparameters,
    fit_hyper,
    read_hyper_json,
    read_training_csv,
    write_hyper_json,
    write_type_table_csv,
)
from fp_estim.mcmc import (
    ConvergenceError,
    DivergenceError,
    InitializationError,
    SamplerConfig,
)
from fp_estim.synth import SynthScenario, generate, recovery_experiment
from fp_estim.validate import (
    GROUP_TABLE_LABELS,
    MODEL_TABLE_LABELS,
    ModeTrajectory,
    PairingError,
    export_roc_comparison,
    impact_analysis,
    run_validation,
    write_cases_csv,
    write_impact_csv,
    write_report_csv,
    write_roc_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARNINGS = 2

USER_ERRORS = (
    ParseError,
    ValueError,
    IdentifiabilityError,
    JoinError,
    SelectionError,
    NoSurveyDataError,
    MissingEmuError,
    PairingError,
    ConvergenceError,
    InitializationError,
    DivergenceError,
    OSError,
)

MODE_COLORS = {MODE_SURVEY_ONLY: "tab:blue", MODE_SURVEY_EMU: "tab:orange"}
TYPE_COLORS = {
    DataType.EMU_CLIENTS: "tab:blue",
    DataType.EMU_FACILITIES: "tab:orange",
    DataType.FP_VISITS: "tab:green",
    DataType.FP_USERS: "tab:red",
}
FIG_METADATA = {"Software": f"fp-estim {__version__}"}
_LABEL_TO_TYPE = {d.label: d for d in DataType}


def resolve_seed(value: int | None) -> int:
    """Explicit flag, then the FP_ESTIM_SEED environment variable, then 0."""
    if value is not None:
        return value
    env = os.environ.get("FP_ESTIM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"FP_ESTIM_SEED must be an integer, got {env!r}") from None
    return 0


def sampler_config(args, seed: int) -> SamplerConfig:
    return SamplerConfig(
        n_chains=args.chains,
        n_warmup=args.warmup,
        n_samples=args.samples,
        seed=seed,
    )


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, seed: int, flags: dict, inputs) -> None:
    """Record everything that determines the run; deliberately no timestamps."""
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "flags": flags,
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (out_dir / "manifest.json").write_text(text, encoding="utf-8")


def _save_figure(fig, path) -> None:
    fig.savefig(path, dpi=150, metadata=FIG_METADATA)
    plt.close(fig)


def _load_hyper(path):
    return read_hyper_json(path) if path is not None else default_hyperparameters()


# ---------------------------------------------------------------- figures


def _fig_fit(country, group, fits, surveys, rates, path) -> None:
    """Trajectory panel (plus an annual-change panel when EMU rates exist)."""
    if rates:
        fig, (ax, ax2) = plt.subplots(2, 1, figsize=(7.0, 7.0), sharex=True)
    else:
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        ax2 = None
    for fit in fits:
        color = MODE_COLORS[fit.mode]
        ax.plot(fit.years, fit.rho_median, color=color, label=fit.mode)
        ax.fill_between(fit.years, fit.rho_lo, fit.rho_hi, color=color, alpha=0.2, lw=0)
    ax.errorbar(
        [s.year for s in surveys],
        [s.value for s in surveys],
        yerr=[1.96 * s.se for s in surveys],
        fmt="o",
        color="black",
        ms=4,
        lw=1,
        label="surveys",
    )
    ax.set_ylabel("mCPR")
    ax.set_title(f"{country} {group.value}")
    ax.legend(loc="best", fontsize=8)
    if ax2 is not None:
        for fit in fits:
            ax2.plot(fit.years[1:], fit.drho_median, color=MODE_COLORS[fit.mode])
        ax2.errorbar(
            [r.year for r in rates],
            [r.value for r in rates],
            yerr=[1.96 * r.sd for r in rates],
            fmt="s",
            color="dimgray",
            ms=4,
            lw=1,
            label="EMU rates",
        )
        ax2.axhline(0.0, color="gray", lw=0.5)
        ax2.set_ylabel("annual change")
        ax2.set_xlabel("year")
        ax2.legend(loc="best", fontsize=8)
    else:
        ax.set_xlabel("year")
    fig.tight_layout()
    _save_figure(fig, path)


def _fig_hyper(estimates, path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    xs = np.arange(len(DataType))
    for i, d in enumerate(DataType):
        t = estimates.types[d]
        mid = math.exp(t.theta_hat)
        ax.vlines(i, t.ci_low, t.ci_high, color="tab:blue", lw=2)
        ax.plot([i], [mid], "o", color="tab:blue")
    ax.set_xticks(xs)
    ax.set_xticklabels([d.label for d in DataType], rotation=20, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("sigma (proportion scale)")
    ax.set_title("Type-specific EMU extra-noise estimates")
    fig.tight_layout()
    _save_figure(fig, path)


def _fig_validation(rows, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    labels = [
        f"{GROUP_TABLE_LABELS[r.group]}\n{MODEL_TABLE_LABELS[r.model]}" for r in rows
    ]
    xs = np.arange(len(rows))
    ax1.bar(xs, [r.coverage for r in rows], color="tab:blue")
    ax1.axhline(95.0, color="black", ls="--", lw=1)
    ax1.set_xticks(xs)
    ax1.set_xticklabels(labels, fontsize=7)
    ax1.set_ylabel("coverage (%)")
    ax1.set_ylim(0, 105)
    width = 0.27
    for k, (name, key) in enumerate((("ME", "me"), ("MAE", "mae"), ("RMSE", "rmse"))):
        ax2.bar(xs + (k - 1) * width, [getattr(r, key) for r in rows], width, label=name)
    ax2.axhline(0.0, color="gray", lw=0.5)
    ax2.set_xticks(xs)
    ax2.set_xticklabels(labels, fontsize=7)
    ax2.set_ylabel("error (pp)")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    _save_figure(fig, path)


def _fig_impact(pair_rows, path) -> None:
    cells: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in pair_rows:
        cells[(r["group"], r["data_type"])].append(r["diff_pp"])
    keys = sorted(cells)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(keys)), 4.5))
    ax.boxplot([cells[k] for k in keys], tick_labels=[f"{g}\n{d}" for g, d in keys])
    ax.axhline(0.0, color="gray", lw=0.5)
    ax.set_ylabel("mCPR difference (pp)")
    ax.set_title("EMU-inclusive minus survey-only point estimates")
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    _save_figure(fig, path)


def _fig_roc(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    by_type: dict[DataType, list[dict]] = defaultdict(list)
    for r in rows:
        by_type[r["data_type"]].append(r)
    for d in sorted(by_type):
        sub = by_type[d]
        ax.errorbar(
            [r["drho"] for r in sub],
            [r["dz"] for r in sub],
            yerr=[1.96 * r["s"] for r in sub],
            fmt="o",
            ms=4,
            lw=0.8,
            color=TYPE_COLORS[d],
            label=d.label,
        )
    span = 0.05
    if rows:
        span = max(
            abs(v) for r in rows for v in (r["drho"], r["lo95"], r["hi95"])
        ) * 1.1
    ax.plot([-span, span], [-span, span], color="gray", lw=0.8, ls="--")
    ax.set_xlabel("model mCPR annual change")
    ax.set_ylabel("EMU annual change")
    if by_type:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save_figure(fig, path)


# ---------------------------------------------------------------- commands


def cmd_train_hyper(args) -> int:
    seed = resolve_seed(args.seed)
    records = read_training_csv(args.training)
    config = sampler_config(args, seed)
    fit = fit_hyper(records, config)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_hyper_json(fit.estimates, out / "hyperparameters.json")
    write_type_table_csv(fit.estimates, out / "type_sds.csv")
    diag = {
        "rhat": {n: float(r) for n, r in zip(fit.draws.names, fit.draws.rhat)},
        "ess": {n: float(e) for n, e in zip(fit.draws.names, fit.draws.ess)},
        "accept_rate_mean": float(np.mean(fit.draws.accept_rates)),
        "n_records": len(records),
        "warnings": list(fit.warnings),
    }
    (out / "diagnostics.json").write_text(
        json.dumps(diag, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if not args.no_figures:
        _fig_hyper(fit.estimates, out / "type_sds.png")
    write_manifest(
        out,
        "train-hyper",
        seed,
        {
            "training": str(args.training),
            "chains": args.chains,
            "warmup": args.warmup,
            "samples": args.samples,
            "no_figures": args.no_figures,
        },
        [args.training],
    )
    return EXIT_WARNINGS if fit.warnings else EXIT_OK


def _fit_requested(args):
    """Parse inputs and expand the requested (country, group, mode) jobs."""
    surveys = read_surveys_csv(args.surveys)
    if not surveys:
        raise NoSurveyDataError(f"no survey rows in {args.surveys}")
    emu_all = read_emu_csv(args.emu) if args.emu is not None else []
    hyper = _load_hyper(args.hyper)
    modes = list(MODES) if args.mode == "both" else [args.mode]
    if MODE_SURVEY_EMU in modes and args.emu is None:
        raise MissingEmuError("--emu is required when fitting the survey+EMU model")

    by_pair: dict[tuple[str, PopulationGroup], list] = defaultdict(list)
    for obs in surveys:
        by_pair[(obs.country_id, obs.group)].append(obs)
    countries = args.country or sorted({c for c, _ in by_pair})
    unknown = [c for c in countries if all(pc != c for pc, _ in by_pair)]
    if unknown:
        raise NoSurveyDataError(f"no surveys for requested countries: {', '.join(unknown)}")

    override = DataType(args.emu_type) if args.emu_type is not None else None
    jobs = []
    for country in countries:
        country_emu = [o for o in emu_all if o.country_id == country]
        rates_by_group = attach_emu(country_emu, override) if country_emu else {}
        if args.group:
            groups = [PopulationGroup(g) for g in args.group]
        else:
            groups = sorted(
                (g for c, g in by_pair if c == country), key=lambda g: g.value
            )
        for group in groups:
            pair_surveys = sorted(
                by_pair.get((country, group), []), key=lambda o: o.year
            )
            if not pair_surveys:
                raise NoSurveyDataError(f"no surveys for {country}/{group.value}")
            rates = rates_by_group.get(group, [])
            for mode in modes:
                jobs.append((country, group, mode, pair_surveys, rates))
    return hyper, jobs


def _fit_year_range(args, pair_surveys, rates) -> tuple[int, int]:
    lo = min(o.year for o in pair_surveys)
    hi = max(o.year for o in pair_surveys)
    if rates:
        lo = min(lo, min(o.year for o in rates) - 1)
        hi = max(hi, max(float(o.year) for o in rates))
    start = args.start_year if args.start_year is not None else int(math.floor(lo))
    end = args.end_year if args.end_year is not None else int(math.ceil(hi)) + args.horizon
    return start, end


PLOTDATA_COLUMNS = ("country_id", "group", "model", "series", "year", "value", "lo95", "hi95")


def _write_plotdata(path, country, group, fits, surveys, rates) -> None:
    """Figure-panel content as data: fitted series plus observed overlays."""
    lines = [",".join(PLOTDATA_COLUMNS)]
    for fit in sorted(fits, key=lambda f: f.mode):
        for i, year in enumerate(fit.years):
            lines.append(
                f"{country},{group.value},{fit.mode},estimate,{int(year)},"
                f"{fit.rho_median[i]:.6f},{fit.rho_lo[i]:.6f},{fit.rho_hi[i]:.6f}"
            )
    for s in surveys:
        lo, hi = s.value - 1.96 * s.se, s.value + 1.96 * s.se
        lines.append(
            f"{country},{group.value},,survey,{s.year:g},{s.value:.6f},{lo:.6f},{hi:.6f}"
        )
    for r in rates:
        lo, hi = r.value - 1.96 * r.sd, r.value + 1.96 * r.sd
        lines.append(
            f"{country},{group.value},,emu_rate,{r.year},{r.value:.6f},{lo:.6f},{hi:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_fit(args) -> int:
    seed = resolve_seed(args.seed)
    hyper, jobs = _fit_requested(args)
    base = sampler_config(args, seed)

    def _one(job) -> CountryFitResult:
        country, group, mode, pair_surveys, rates = job
        config = replace(base, seed=derive_seed(seed, "fit", country, group.value))
        year_range = _fit_year_range(args, pair_surveys, rates)
        return fit_country(
            pair_surveys,
            rates if mode == MODE_SURVEY_EMU else [],
            hyper,
            mode,
            year_range,
            config,
        )

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            fits = list(pool.map(_one, jobs))
    else:
        fits = [_one(j) for j in jobs]

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_estimates_csv(fits, out / "estimates.csv")
    write_diagnostics_json(fits, out / "diagnostics.json")

    by_pair: dict[tuple[str, PopulationGroup], list[CountryFitResult]] = defaultdict(list)
    pair_data = {}
    for job, fit in zip(jobs, fits):
        country, group, _, pair_surveys, rates = job
        by_pair[(country, group)].append(fit)
        pair_data[(country, group)] = (pair_surveys, rates)
    for (country, group), pair_fits in sorted(
        by_pair.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        pair_surveys, rates = pair_data[(country, group)]
        stem = f"{country}_{group.value}"
        _write_plotdata(
            out / f"plotdata_{stem}.csv", country, group, pair_fits, pair_surveys, rates
        )
        if not args.no_figures:
            _fig_fit(country, group, pair_fits, pair_surveys, rates, out / f"fit_{stem}.png")

    inputs = [args.surveys] + [p for p in (args.emu, args.hyper) if p is not None]
    write_manifest(
        out,
        "fit",
        seed,
        {
            "surveys": str(args.surveys),
            "emu": str(args.emu) if args.emu else None,
            "hyper": str(args.hyper) if args.hyper else None,
            "mode": args.mode,
            "country": args.country,
            "group": args.group,
            "emu_type": args.emu_type,
            "start_year": args.start_year,
            "end_year": args.end_year,
            "horizon": args.horizon,
            "jobs": args.jobs,
            "chains": args.chains,
            "warmup": args.warmup,
            "samples": args.samples,
            "no_figures": args.no_figures,
        },
        inputs,
    )
    has_convergence_warning = any("R-hat" in w for f in fits for w in f.warnings)
    return EXIT_WARNINGS if has_convergence_warning else EXIT_OK


def cmd_validate(args) -> int:
    seed = resolve_seed(args.seed)
    surveys = read_surveys_csv(args.surveys)
    emu = read_emu_csv(args.emu) if args.emu is not None else []
    hyper = _load_hyper(args.hyper)
    config = sampler_config(args, seed)

    outcome = run_validation(
        surveys,
        emu,
        hyper,
        config,
        pre_survey_only=args.pre_survey_only,
        jobs=args.jobs,
    )

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(outcome.rows, out / "validation_report.csv")
    write_cases_csv(outcome.cases, out / "validation_cases.csv")
    if not args.no_figures:
        _fig_validation(outcome.rows, out / "validation_metrics.png")
    inputs = [args.surveys] + [p for p in (args.emu, args.hyper) if p is not None]
    write_manifest(
        out,
        "validate",
        seed,
        {
            "surveys": str(args.surveys),
            "emu": str(args.emu) if args.emu else None,
            "hyper": str(args.hyper) if args.hyper else None,
            "pre_survey_only": args.pre_survey_only,
            "jobs": args.jobs,
            "chains": args.chains,
            "warmup": args.warmup,
            "samples": args.samples,
            "no_figures": args.no_figures,
        },
        inputs,
    )
    has_convergence_warning = any("R-hat" in w for w in outcome.warnings)
    return EXIT_WARNINGS if has_convergence_warning else EXIT_OK


def cmd_impact(args) -> int:
    fit_dir = Path(args.fit_dir)
    estimates_path = fit_dir / "estimates.csv"
    diagnostics_path = fit_dir / "diagnostics.json"
    series = read_estimates_csv(estimates_path)
    diag = json.loads(diagnostics_path.read_text(encoding="utf-8"))

    trajectories = []
    for (country, group, mode), entry in sorted(
        series.items(), key=lambda kv: (kv[0][0], kv[0][1].value, kv[0][2])
    ):
        try:
            info = diag[country][group.value][mode]
        except KeyError:
            raise PairingError(
                f"{country}/{group.value} {mode}: diagnostics entry missing"
            ) from None
        sigma_labels = sorted(info.get("sigma", {}))
        trajectories.append(
            ModeTrajectory(
                country_id=country,
                group=group,
                mode=mode,
                years=tuple(entry["years"]),
                median=tuple(entry["median"]),
                lo95=tuple(entry["lo95"]),
                hi95=tuple(entry["hi95"]),
                data_type=_LABEL_TO_TYPE[sigma_labels[0]] if sigma_labels else None,
                seed=int(info["seed"]),
            )
        )
    pair_rows, aggregate_rows = impact_analysis(trajectories, args.target_year)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_impact_csv(pair_rows, aggregate_rows, out / "impact.csv")
    if not args.no_figures:
        _fig_impact(pair_rows, out / "impact_boxplot.png")
    write_manifest(
        out,
        "impact",
        resolve_seed(args.seed),
        {
            "fit_dir": str(args.fit_dir),
            "target_year": args.target_year,
            "no_figures": args.no_figures,
        },
        [estimates_path, diagnostics_path],
    )
    return EXIT_OK


def _collect_rates(observations, group: PopulationGroup):
    """All annual rates targeting a group, differencing levels per data type."""
    rows = [o for o in observations if group in o.target_groups]
    explicit = [o for o in rows if o.kind is ObservationKind.RATE]
    by_series = defaultdict(list)
    for o in rows:
        if o.kind is ObservationKind.LEVEL:
            by_series[(o.country_id, o.data_type, o.target_groups)].append(o)
    derived = []
    for levels in by_series.values():
        derived.extend(rate_of_change(sorted(levels, key=lambda o: o.year)))
    have = {(o.country_id, o.data_type, o.year) for o in explicit}
    return explicit + [
        r for r in derived if (r.country_id, r.data_type, r.year) not in have
    ]


def cmd_export_roc(args) -> int:
    group = PopulationGroup(args.group)
    emu_obs = read_emu_csv(args.emu)
    series = read_estimates_csv(args.estimates)

    estimates_map: dict[str, dict[int, float]] = {}
    for (country, g, mode), entry in sorted(
        series.items(), key=lambda kv: (kv[0][0], kv[0][2])
    ):
        if g != group:
            continue
        # prefer the survey-only series when both model variants are present
        if country in estimates_map and mode != MODE_SURVEY_ONLY:
            continue
        estimates_map[country] = dict(entry["drho_median"])

    survey_years = None
    inputs = [args.emu, args.estimates]
    if args.pre_survey_only:
        if args.surveys is None:
            raise ValueError("--pre-survey-only requires --surveys")
        surveys = read_surveys_csv(args.surveys)
        survey_years = {}
        for s in surveys:
            if s.group == group:
                survey_years[s.country_id] = max(
                    s.year, survey_years.get(s.country_id, s.year)
                )
        inputs.append(args.surveys)

    rates = _collect_rates(emu_obs, group)
    rows = export_roc_comparison(rates, estimates_map, survey_years)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_roc_csv(rows, out / "roc_comparison.csv")
    if not args.no_figures:
        _fig_roc(rows, out / "roc_scatter.png")
    write_manifest(
        out,
        "export-roc",
        resolve_seed(args.seed),
        {
            "emu": str(args.emu),
            "estimates": str(args.estimates),
            "surveys": str(args.surveys) if args.surveys else None,
            "group": args.group,
            "pre_survey_only": args.pre_survey_only,
            "no_figures": args.no_figures,
        },
        inputs,
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = SynthScenario.from_json(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    code = EXIT_OK
    if args.recovery:
        config = sampler_config(args, scenario.seed)
        report = recovery_experiment(scenario, config)
        (out / "recovery_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        if report["passed"] is False:
            code = EXIT_ERROR
        elif any("R-hat" in w for w in report["warnings"]):
            code = EXIT_WARNINGS
    else:
        generate(scenario, out_dir=out)
    write_manifest(
        out,
        "simulate",
        scenario.seed,
        {
            "scenario": str(args.scenario),
            "recovery": args.recovery,
            "chains": args.chains,
            "warmup": args.warmup,
            "samples": args.samples,
        },
        [args.scenario],
    )
    return code


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fp-estim",
        description="Estimate mCPR by fusing surveys with service-statistics rates of change.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--seed",
        type=int,
        default=None,
        help="RNG seed; falls back to FP_ESTIM_SEED, then 0",
    )
    common.add_argument("--out-dir", required=True, help="output directory")
    common.add_argument("--verbose", action="store_true", help="log progress to stderr")

    sampler = argparse.ArgumentParser(add_help=False)
    sampler.add_argument("--chains", type=int, default=4)
    sampler.add_argument("--warmup", type=int, default=2000)
    sampler.add_argument("--samples", type=int, default=2000)

    figures = argparse.ArgumentParser(add_help=False)
    figures.add_argument(
        "--no-figures",
        action="store_true",
        help="skip PNG rendering; plot-ready CSVs are always written",
    )

    p = sub.add_parser(
        "train-hyper",
        parents=[common, sampler, figures],
        help="fit the hierarchical variance model to a training table",
    )
    p.add_argument("--training", required=True, help="training CSV")
    p.set_defaults(func=cmd_train_hyper)

    p = sub.add_parser(
        "fit",
        parents=[common, sampler, figures],
        help="fit country trajectories from surveys (optionally with EMU rates)",
    )
    p.add_argument("--surveys", required=True, help="surveys CSV")
    p.add_argument("--emu", help="EMU observations CSV")
    p.add_argument("--hyper", help="hyperparameters JSON (default: shipped values)")
    p.add_argument(
        "--mode",
        choices=[MODE_SURVEY_ONLY, MODE_SURVEY_EMU, "both"],
        default="both",
    )
    p.add_argument("--country", action="append", help="country to fit (repeatable; default all)")
    p.add_argument(
        "--group",
        action="append",
        choices=[g.value for g in PopulationGroup],
        help="population group to fit (repeatable; default all present)",
    )
    p.add_argument(
        "--emu-type",
        type=int,
        choices=[int(d) for d in DataType],
        help="override the selected EMU data type",
    )
    p.add_argument("--start-year", type=int)
    p.add_argument("--end-year", type=int)
    p.add_argument(
        "--horizon",
        type=int,
        default=5,
        help="forecast years beyond the last data year (default 5)",
    )
    p.add_argument("--jobs", type=int, default=1, help="parallel fit workers")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser(
        "validate",
        parents=[common, sampler, figures],
        help="leave-one-out validation holding out each latest survey",
    )
    p.add_argument("--surveys", required=True)
    p.add_argument("--emu")
    p.add_argument("--hyper")
    p.add_argument(
        "--pre-survey-only",
        action="store_true",
        help="drop EMU rates dated after each held-out survey",
    )
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser(
        "impact",
        parents=[common, figures],
        help="difference survey+EMU against survey-only estimates from a fit run",
    )
    p.add_argument("--fit-dir", required=True, help="output directory of a 'fit --mode both' run")
    p.add_argument("--target-year", type=int, required=True)
    p.set_defaults(func=cmd_impact)

    p = sub.add_parser(
        "export-roc",
        parents=[common, figures],
        help="pair EMU annual changes with model mCPR annual changes",
    )
    p.add_argument("--emu", required=True)
    p.add_argument("--estimates", required=True, help="estimates CSV from a fit run")
    p.add_argument("--surveys", help="needed with --pre-survey-only")
    p.add_argument("--group", choices=[g.value for g in PopulationGroup], default="MWRA")
    p.add_argument(
        "--pre-survey-only",
        action="store_true",
        help="keep only rates before each country's most recent survey",
    )
    p.set_defaults(func=cmd_export_roc)

    p = sub.add_parser(
        "simulate",
        parents=[common, sampler],
        help="generate synthetic data, or run the recovery experiment",
    )
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument(
        "--recovery",
        action="store_true",
        help="generate, refit, and score against the known truth",
    )
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, but 2 means "converged with
        # warnings" here; fold usage problems into the generic error code
        return EXIT_OK if exc.code in (0, None) else EXIT_ERROR
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
