"""Leave-one-out validation, prediction metrics, and EMU impact summaries.

The harness holds out each country/group's most recent survey, refits on
everything earlier (with or without EMU rates), and checks whether the model
projects the held-out observation inside its 95% predictive interval. Errors
are in percentage points of prevalence; a positive error means the model
under-predicted the held-out value. Both model variants of a case share one
derived seed so that EMU inclusion is the only difference between the arms.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fp_estim.core import (
    DataType,
    EmuObservation,
    HyperEstimates,
    ObservationKind,
    PopulationGroup,
    SurveyObservation,
    delta_method_se,
    derive_seed,
    inverse_logit,
)
from fp_estim.countryfit import (
    MODE_SURVEY_EMU,
    MODE_SURVEY_ONLY,
    MODES,
    CountryFitResult,
    attach_emu,
    fit_country,
)
from fp_estim.mcmc import SamplerConfig

logger = logging.getLogger(__name__)

# presentation labels for the report table
GROUP_TABLE_LABELS = {
    PopulationGroup.MWRA: "Married",
    PopulationGroup.UWRA: "Unmarried",
    PopulationGroup.AWRA: "All women",
}
MODEL_TABLE_LABELS = {
    MODE_SURVEY_ONLY: "Survey-only",
    MODE_SURVEY_EMU: "Survey+EMU",
}


class PairingError(Exception):
    """Impact analysis requires both model variants per country/group, same seed."""


@dataclass(frozen=True)
class ValidationCase:
    """One held-out survey with the data the model is allowed to see."""

    country_id: str
    group: PopulationGroup
    held_out: SurveyObservation
    training: tuple[SurveyObservation, ...]
    emu: tuple[EmuObservation, ...]

    def __post_init__(self) -> None:
        if not self.training:
            raise ValueError("a case needs at least one training survey")
        for obs in self.training:
            if not obs.year < self.held_out.year:
                raise ValueError(
                    "held-out survey must be strictly the most recent observation"
                )


def build_cases(
    surveys: Sequence[SurveyObservation],
    emu: Sequence[EmuObservation] = (),
    pre_survey_only: bool = False,
) -> list[ValidationCase]:
    """Hold out the most recent survey per country/group.

    Country/groups with fewer than two surveys, or with a tie for the most
    recent year, are skipped with a logged reason. EMU rates dated after the
    held-out survey are kept by default (the model runs as it would in
    production); ``pre_survey_only`` drops them instead.
    """
    by_pair: dict[tuple[str, PopulationGroup], list[SurveyObservation]] = defaultdict(list)
    for obs in surveys:
        by_pair[(obs.country_id, obs.group)].append(obs)

    emu_by_country: dict[str, list[EmuObservation]] = defaultdict(list)
    for obs in emu:
        emu_by_country[obs.country_id].append(obs)
    rates_by_pair: dict[str, dict[PopulationGroup, list[EmuObservation]]] = {
        c: attach_emu(obs_list) for c, obs_list in emu_by_country.items()
    }

    cases = []
    for (country, group), obs_list in sorted(by_pair.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        if len(obs_list) < 2:
            logger.info("%s/%s skipped: only %d survey", country, group.value, len(obs_list))
            continue
        obs_list = sorted(obs_list, key=lambda o: o.year)
        held_out = obs_list[-1]
        if obs_list[-2].year == held_out.year:
            logger.info(
                "%s/%s skipped: tie for most recent survey year %s",
                country, group.value, held_out.year,
            )
            continue
        rates = rates_by_pair.get(country, {}).get(group, [])
        if pre_survey_only:
            rates = [r for r in rates if r.year <= held_out.year]
        cases.append(
            ValidationCase(
                country_id=country,
                group=group,
                held_out=held_out,
                training=tuple(obs_list[:-1]),
                emu=tuple(rates),
            )
        )
    return cases


def predictive_interval(
    fit: CountryFitResult, held_out: SurveyObservation
) -> tuple[float, float]:
    """95% predictive bounds for a new survey observation at the held-out year.

    Each posterior draw of the logit-scale level gets one draw of survey
    sampling noise before back-transforming; without that noise term, nominal
    coverage of noisy test points would be unattainable. The noise stream is
    derived from the fit's seed, so the interval is reproducible.
    """
    eta = fit.eta_draws(held_out.year)
    se_logit = delta_method_se(held_out.value, held_out.se)
    rng = np.random.default_rng(
        derive_seed(fit.seed, "predictive", fit.country_id, fit.group.value, held_out.year)
    )
    rho_new = inverse_logit(eta + se_logit * rng.standard_normal(eta.shape[0]))
    lo, hi = np.percentile(rho_new, [2.5, 97.5])
    return float(lo), float(hi)


def metrics(errors: Sequence[float], hits: Sequence[bool]) -> dict[str, float]:
    """Prediction-error summary: n, coverage (%), ME, MAE, RMSE.

    Errors are held-out minus predicted, in percentage points; positive mean
    error indicates under-prediction.
    """
    if len(errors) == 0 or len(hits) == 0:
        raise ValueError("metrics requires nonempty errors and hits")
    if len(errors) != len(hits):
        raise ValueError("errors and hits must have equal length")
    err = np.asarray(errors, dtype=float)
    return {
        "n": len(err),
        "coverage": 100.0 * float(np.mean(np.asarray(hits, dtype=bool))),
        "me": float(np.mean(err)),
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err**2))),
    }


@dataclass(frozen=True)
class CaseResult:
    """Outcome of projecting one held-out survey under one model variant."""

    country_id: str
    group: PopulationGroup
    mode: str
    held_out_year: float
    held_out_value: float
    predicted: float
    lo95: float
    hi95: float

    @property
    def error_pp(self) -> float:
        return 100.0 * (self.held_out_value - self.predicted)

    @property
    def hit(self) -> bool:
        return self.lo95 <= self.held_out_value <= self.hi95


def case_year_range(case: ValidationCase) -> tuple[int, int]:
    """The shared fitting grid for both arms of a case.

    Spans every training survey, every attached EMU rate (a rate at year y
    constrains the step from y-1), and the held-out year itself so the
    prediction can be read off the fitted trajectory.
    """
    lo = min(obs.year for obs in case.training)
    hi = max(obs.year for obs in case.training)
    if case.emu:
        lo = min(lo, min(r.year for r in case.emu) - 1)
        hi = max(hi, max(float(r.year) for r in case.emu))
    hi = max(hi, case.held_out.year)
    return int(math.floor(lo)), int(math.ceil(hi))


def evaluate_case(
    case: ValidationCase,
    hyper: HyperEstimates,
    config: SamplerConfig,
    mode: str,
) -> tuple[CaseResult, CountryFitResult]:
    """Fit one arm of one case and score the held-out projection."""
    emu = list(case.emu) if mode == MODE_SURVEY_EMU else []
    seed = derive_seed(config.seed, "validate", case.country_id, case.group.value)
    fit = fit_country(
        list(case.training),
        emu,
        hyper,
        mode,
        case_year_range(case),
        replace(config, seed=seed),
    )
    predicted = float(np.median(fit.rho_draws(case.held_out.year)))
    lo, hi = predictive_interval(fit, case.held_out)
    result = CaseResult(
        country_id=case.country_id,
        group=case.group,
        mode=mode,
        held_out_year=case.held_out.year,
        held_out_value=case.held_out.value,
        predicted=predicted,
        lo95=lo,
        hi95=hi,
    )
    return result, fit


@dataclass
class ValidationOutcome:
    cases: list[CaseResult]
    rows: list[MetricRow]
    warnings: list[str]


@dataclass(frozen=True)
class MetricRow:
    """One report line: a (group, model) cell of the validation table."""

    group: PopulationGroup
    model: str
    n: int
    coverage: float
    me: float
    mae: float
    rmse: float


def build_report(cases: Sequence[CaseResult]) -> list[MetricRow]:
    """Aggregate case results into per (group, model) metric rows."""
    if not cases:
        raise ValueError("no case results to aggregate")
    by_cell: dict[tuple[PopulationGroup, str], list[CaseResult]] = defaultdict(list)
    for c in cases:
        by_cell[(c.group, c.mode)].append(c)
    rows = []
    # survey-only rows precede survey+EMU within each group, as published
    for (group, mode), cell in sorted(
        by_cell.items(), key=lambda kv: (kv[0][0].value, MODES.index(kv[0][1]))
    ):
        m = metrics([c.error_pp for c in cell], [c.hit for c in cell])
        rows.append(
            MetricRow(
                group=group,
                model=mode,
                n=m["n"],
                coverage=m["coverage"],
                me=m["me"],
                mae=m["mae"],
                rmse=m["rmse"],
            )
        )
    return rows


def run_validation(
    surveys: Sequence[SurveyObservation],
    emu: Sequence[EmuObservation],
    hyper: HyperEstimates,
    config: SamplerConfig,
    modes: Sequence[str] = MODES,
    pre_survey_only: bool = False,
    jobs: int = 1,
) -> ValidationOutcome:
    """Run the full leave-one-out exercise over every eligible country/group."""
    cases = build_cases(surveys, emu, pre_survey_only=pre_survey_only)
    if not cases:
        raise ValueError("no country/group has enough surveys to validate")

    tasks = [(case, mode) for case in cases for mode in modes]

    def _one(task):
        case, mode = task
        return evaluate_case(case, hyper, config, mode)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_one, tasks))
    else:
        outcomes = [_one(t) for t in tasks]

    results = [res for res, _ in outcomes]
    warnings = []
    for res, fit in outcomes:
        for msg in fit.warnings:
            warnings.append(f"{res.country_id}/{res.group.value} {res.mode}: {msg}")
    return ValidationOutcome(
        cases=results, rows=build_report(results), warnings=warnings
    )


REPORT_COLUMNS = ("group", "model", "n", "coverage", "me", "mae", "rmse")


def write_report_csv(rows: Sequence[MetricRow], path) -> None:
    """Validation summary table; coverage at one decimal, errors at two."""
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        lines.append(
            f"{GROUP_TABLE_LABELS[r.group]},{MODEL_TABLE_LABELS[r.model]},{r.n},"
            f"{r.coverage:.1f},{r.me:.2f},{r.mae:.2f},{r.rmse:.2f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


CASE_COLUMNS = (
    "country_id",
    "group",
    "model",
    "held_out_year",
    "held_out_value",
    "predicted_median",
    "lo95",
    "hi95",
    "error_pp",
    "inside",
)


def write_cases_csv(cases: Sequence[CaseResult], path) -> None:
    lines = [",".join(CASE_COLUMNS)]
    ordered = sorted(cases, key=lambda c: (c.country_id, c.group.value, c.mode))
    for c in ordered:
        lines.append(
            f"{c.country_id},{c.group.value},{c.mode},{c.held_out_year:g},"
            f"{c.held_out_value:.6f},{c.predicted:.6f},{c.lo95:.6f},{c.hi95:.6f},"
            f"{c.error_pp:.4f},{int(c.hit)}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ModeTrajectory:
    """The slice of a fit that impact analysis needs, decoupled from draws.

    Built either from an in-memory CountryFitResult or re-read from a fit
    run's estimates CSV plus diagnostics.
    """

    country_id: str
    group: PopulationGroup
    mode: str
    years: tuple[int, ...]
    median: tuple[float, ...]
    lo95: tuple[float, ...]
    hi95: tuple[float, ...]
    data_type: DataType | None
    seed: int

    @classmethod
    def from_fit(cls, fit: CountryFitResult) -> "ModeTrajectory":
        types = sorted(fit.sigma_summary)
        return cls(
            country_id=fit.country_id,
            group=fit.group,
            mode=fit.mode,
            years=tuple(int(y) for y in fit.years),
            median=tuple(float(v) for v in fit.rho_median),
            lo95=tuple(float(v) for v in fit.rho_lo),
            hi95=tuple(float(v) for v in fit.rho_hi),
            data_type=types[0] if types else None,
            seed=fit.seed,
        )


def impact_analysis(
    trajectories: Sequence[ModeTrajectory], target_year: int
) -> tuple[list[dict], list[dict]]:
    """Per-pair and aggregate differences of EMU-inclusive minus survey-only.

    Differences are in percentage points of the target-year posterior median;
    each pair also reports the change in 95% CI width. Aggregates give
    min/median/max of the point differences per (group, data type).
    """
    by_pair: dict[tuple[str, PopulationGroup], dict[str, ModeTrajectory]] = defaultdict(dict)
    for t in trajectories:
        if t.mode in by_pair[(t.country_id, t.group)]:
            raise PairingError(
                f"{t.country_id}/{t.group.value}: duplicate {t.mode} trajectory"
            )
        by_pair[(t.country_id, t.group)][t.mode] = t

    pair_rows = []
    diffs_by_cell: dict[tuple[PopulationGroup, str], list[float]] = defaultdict(list)
    for (country, group), modes in sorted(
        by_pair.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
    ):
        missing = [m for m in MODES if m not in modes]
        if missing:
            raise PairingError(
                f"{country}/{group.value}: missing {' and '.join(missing)} fit"
            )
        so, em = modes[MODE_SURVEY_ONLY], modes[MODE_SURVEY_EMU]
        if so.seed != em.seed:
            raise PairingError(
                f"{country}/{group.value}: arms fitted with different seeds "
                f"({so.seed} vs {em.seed})"
            )
        try:
            i_so = so.years.index(target_year)
            i_em = em.years.index(target_year)
        except ValueError:
            raise PairingError(
                f"{country}/{group.value}: target year {target_year} outside fitted grid"
            ) from None
        diff = 100.0 * (em.median[i_em] - so.median[i_so])
        width_diff = 100.0 * (
            (em.hi95[i_em] - em.lo95[i_em]) - (so.hi95[i_so] - so.lo95[i_so])
        )
        label = em.data_type.label if em.data_type is not None else "none"
        pair_rows.append(
            {
                "country_id": country,
                "group": group.value,
                "data_type": label,
                "diff_pp": diff,
                "ci_width_diff_pp": width_diff,
            }
        )
        diffs_by_cell[(group, label)].append(diff)

    aggregate_rows = []
    for (group, label), diffs in sorted(
        diffs_by_cell.items(), key=lambda kv: (kv[0][0].value, kv[0][1])
    ):
        aggregate_rows.append(
            {
                "group": group.value,
                "data_type": label,
                "n": len(diffs),
                "min_pp": float(np.min(diffs)),
                "median_pp": float(np.median(diffs)),
                "max_pp": float(np.max(diffs)),
            }
        )
    return pair_rows, aggregate_rows


IMPACT_COLUMNS = (
    "scope",
    "country_id",
    "group",
    "data_type",
    "diff_pp",
    "ci_width_diff_pp",
    "n",
    "min_pp",
    "median_pp",
    "max_pp",
)


def write_impact_csv(pair_rows: Sequence[dict], aggregate_rows: Sequence[dict], path) -> None:
    """Pair rows first, then aggregate rows; inapplicable cells stay blank."""
    lines = [",".join(IMPACT_COLUMNS)]
    for r in pair_rows:
        lines.append(
            f"pair,{r['country_id']},{r['group']},{r['data_type']},"
            f"{r['diff_pp']:.4f},{r['ci_width_diff_pp']:.4f},,,,"
        )
    for r in aggregate_rows:
        lines.append(
            f"aggregate,,{r['group']},{r['data_type']},,,"
            f"{r['n']},{r['min_pp']:.4f},{r['median_pp']:.4f},{r['max_pp']:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


ROC_COLUMNS = ("country_id", "data_type", "year", "dz", "s", "lo95", "hi95", "drho")


def export_roc_comparison(
    emu_rates: Sequence[EmuObservation],
    mcpr_estimates: Mapping[str, Mapping[int, float]],
    survey_years: Mapping[str, float] | None = None,
) -> list[dict]:
    """Rows pairing each EMU annual change with the model's mCPR annual change.

    ``survey_years`` (most recent survey year per country), when given,
    restricts rows to years strictly before that survey. Rates with no
    matching mCPR estimate are dropped, so an empty join yields no rows.
    """
    rows = []
    for obs in emu_rates:
        if obs.kind is not ObservationKind.RATE:
            raise ValueError("export_roc_comparison expects rate observations")
        if survey_years is not None:
            last = survey_years.get(obs.country_id)
            if last is None or not obs.year < last:
                continue
        drho = mcpr_estimates.get(obs.country_id, {}).get(obs.year)
        if drho is None:
            continue
        rows.append(
            {
                "country_id": obs.country_id,
                "data_type": obs.data_type,
                "year": obs.year,
                "dz": obs.value,
                "s": obs.sd,
                "lo95": obs.value - 1.96 * obs.sd,
                "hi95": obs.value + 1.96 * obs.sd,
                "drho": float(drho),
            }
        )
    rows.sort(key=lambda r: (r["country_id"], int(r["data_type"]), r["year"]))
    return rows


def write_roc_csv(rows: Sequence[dict], path) -> None:
    lines = [",".join(ROC_COLUMNS)]
    for r in rows:
        lines.append(
            f"{r['country_id']},{r['data_type'].label},{r['year']},"
            f"{r['dz']:.6f},{r['s']:.6f},{r['lo95']:.6f},{r['hi95']:.6f},{r['drho']:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
