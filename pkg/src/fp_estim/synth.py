"""Synthetic-data generator and brute-force oracle for the whole pipeline.

Simulates ground-truth prevalence trajectories from the same process family
the country model fits, then draws surveys and EMU rate series around them
with known noise parameters. Because every latent quantity is recorded,
hyperparameter recovery, predictive coverage, and the value of EMU data can
all be checked end to end without any real corpus.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
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
    combined_sd,
    delta_method_se,
    derive_seed,
    inverse_logit,
    logit,
)
from fp_estim.countryfit import write_emu_csv, write_surveys_csv
from fp_estim.hypertrain import TrainingRecord, fit_hyper, write_training_csv
from fp_estim.mcmc import SamplerConfig

logger = logging.getLogger(__name__)

S_PATTERNS = ("constant", "growing")
# "growing" increases the reported sampling sd by 25% of the base per step
GROWTH_STEP = 0.25
# inverse_logit saturates to exactly 0/1 past |eta| ~ 37; keep proportions
# strictly inside the unit interval so downstream domains always hold
PROP_EPS = 1e-12


@dataclass(frozen=True)
class SynthScenario:
    """Complete description of a simulated multi-country dataset."""

    n_countries: int
    year_start: int
    year_end: int
    theta: tuple[float, float, float, float]
    tau: float
    phi: float
    mu: float
    omega: float
    start_level: tuple[float, float]
    survey_years: tuple[float, ...]
    survey_se: float
    emu_years: tuple[int, ...]
    s_pattern: str = "constant"
    s_base: float = 0.01
    group: PopulationGroup = PopulationGroup.MWRA
    data_types: tuple[DataType, ...] = tuple(DataType)
    seed: int = 0
    trend_break: tuple[int, float] | None = None

    def __post_init__(self) -> None:
        if self.n_countries < 1:
            raise ValueError("n_countries must be positive")
        if not self.year_start < self.year_end:
            raise ValueError("year_start must precede year_end")
        if len(self.theta) != len(DataType):
            raise ValueError(f"theta needs {len(DataType)} entries, one per data type")
        if not self.tau > 0.0 or not self.omega > 0.0:
            raise ValueError("tau and omega must be positive")
        if not 0.0 <= self.phi < 1.0:
            raise ValueError("phi must lie in [0, 1)")
        lo, hi = self.start_level
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("start_level bounds must satisfy 0 < lo <= hi < 1")
        if not self.survey_years:
            raise ValueError("at least one survey year is required")
        for y in self.survey_years:
            if not self.year_start <= y <= self.year_end:
                raise ValueError(f"survey year {y} outside the year grid")
        for y in self.emu_years:
            if not self.year_start < y <= self.year_end:
                raise ValueError(f"EMU rate year {y} outside the year grid")
        if self.s_pattern not in S_PATTERNS:
            raise ValueError(f"s_pattern must be one of {S_PATTERNS}")
        if not self.s_base >= 0.0:
            raise ValueError("s_base must be nonnegative")
        if not self.survey_se > 0.0:
            raise ValueError("survey_se must be positive")
        if not self.data_types:
            raise ValueError("data_types must be nonempty")
        if self.trend_break is not None:
            year, _ = self.trend_break
            if not self.year_start < year <= self.year_end:
                raise ValueError(f"trend break year {year} outside the year grid")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SynthScenario":
        data = dict(raw)
        known = {
            "n_countries",
            "year_start",
            "year_end",
            "theta",
            "tau",
            "phi",
            "mu",
            "omega",
            "start_level",
            "survey_years",
            "survey_se",
            "emu_years",
            "s_pattern",
            "s_base",
            "group",
            "data_types",
            "seed",
            "trend_break",
        }
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
        if "group" in data:
            data["group"] = PopulationGroup(data["group"])
        if "data_types" in data:
            data["data_types"] = tuple(DataType(int(d)) for d in data["data_types"])
        for key in ("theta", "start_level", "survey_years", "emu_years"):
            if key in data:
                data[key] = tuple(data[key])
        if data.get("trend_break") is not None:
            year, mu_after = data["trend_break"]
            data["trend_break"] = (int(year), float(mu_after))
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SynthScenario":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "n_countries": self.n_countries,
            "year_start": self.year_start,
            "year_end": self.year_end,
            "theta": list(self.theta),
            "tau": self.tau,
            "phi": self.phi,
            "mu": self.mu,
            "omega": self.omega,
            "start_level": list(self.start_level),
            "survey_years": list(self.survey_years),
            "survey_se": self.survey_se,
            "emu_years": list(self.emu_years),
            "s_pattern": self.s_pattern,
            "s_base": self.s_base,
            "group": self.group.value,
            "data_types": [int(d) for d in self.data_types],
            "seed": self.seed,
            "trend_break": list(self.trend_break) if self.trend_break else None,
        }


@dataclass
class SynthData:
    """Everything :func:`generate` produced, truth included."""

    scenario: SynthScenario
    years: np.ndarray
    trajectories: dict[str, np.ndarray]
    surveys: list[SurveyObservation]
    emu: list[EmuObservation]
    training: list[TrainingRecord]
    sigma_truth: dict[tuple[str, DataType], float]

    def truth_payload(self) -> dict:
        countries = {}
        for country, rho in sorted(self.trajectories.items()):
            (dtype,) = {d for c, d in self.sigma_truth if c == country}
            countries[country] = {
                "data_type": int(dtype),
                "sigma": self.sigma_truth[(country, dtype)],
                "rho": [round(float(v), 8) for v in rho],
            }
        return {
            "scenario": self.scenario.to_dict(),
            "years": [int(y) for y in self.years],
            "countries": countries,
        }


def _true_s(scenario: SynthScenario, index: int) -> float:
    if scenario.s_pattern == "constant":
        return scenario.s_base
    return scenario.s_base * (1.0 + GROWTH_STEP * index)


def _simulate_trajectory(scenario: SynthScenario, rng: np.random.Generator) -> np.ndarray:
    """Latent logit-scale path from the AR(1)-on-differences process."""
    years = np.arange(scenario.year_start, scenario.year_end + 1)
    n_steps = len(years) - 1
    eta0 = logit(rng.uniform(*scenario.start_level))
    drift = np.full(n_steps, scenario.mu)
    if scenario.trend_break is not None:
        break_year, mu_after = scenario.trend_break
        drift[years[1:] >= break_year] = mu_after

    diffs = np.empty(n_steps)
    diffs[0] = drift[0] + rng.normal(0.0, scenario.omega / math.sqrt(1.0 - scenario.phi**2))
    for t in range(1, n_steps):
        diffs[t] = (
            scenario.phi * diffs[t - 1]
            + (1.0 - scenario.phi) * drift[t]
            + rng.normal(0.0, scenario.omega)
        )
    return np.concatenate([[eta0], eta0 + np.cumsum(diffs)])


def generate(scenario: SynthScenario, out_dir=None) -> SynthData:
    """Simulate the scenario; optionally write the standard file set.

    Every country draws from its own seed substream, so the output is
    byte-identical for a given scenario regardless of generation order.
    Survey values are drawn logit-normally around the true path with the
    delta-method sd implied by the true level and the scenario's survey se;
    EMU rates are drawn around true annual changes at sd sqrt(s^2 + sigma^2).
    """
    years = np.arange(scenario.year_start, scenario.year_end + 1)
    trajectories: dict[str, np.ndarray] = {}
    surveys: list[SurveyObservation] = []
    emu: list[EmuObservation] = []
    training: list[TrainingRecord] = []
    sigma_truth: dict[tuple[str, DataType], float] = {}

    for i in range(scenario.n_countries):
        country = f"S{i + 1:03d}"
        rng = np.random.default_rng(derive_seed(scenario.seed, "synth", i))
        eta = _simulate_trajectory(scenario, rng)
        rho = np.clip(inverse_logit(eta), PROP_EPS, 1.0 - PROP_EPS)
        trajectories[country] = rho

        for j, year in enumerate(scenario.survey_years):
            k = int(math.floor(year)) - scenario.year_start
            w = year - math.floor(year)
            k_hi = min(k + 1, len(eta) - 1)
            eta_y = (1.0 - w) * eta[k] + w * eta[k_hi]
            se_logit = delta_method_se(float(inverse_logit(eta_y)), scenario.survey_se)
            value = float(inverse_logit(eta_y + se_logit * rng.standard_normal()))
            value = float(np.clip(value, PROP_EPS, 1.0 - PROP_EPS))
            surveys.append(
                SurveyObservation(
                    country_id=country,
                    group=scenario.group,
                    year=float(year),
                    value=value,
                    se=scenario.survey_se,
                    source_id=f"synth-{j}",
                )
            )

        dtype = scenario.data_types[i % len(scenario.data_types)]
        sigma = math.exp(
            scenario.theta[int(dtype) - 1] + scenario.tau * rng.standard_normal()
        )
        sigma_truth[(country, dtype)] = sigma
        for j, year in enumerate(sorted(scenario.emu_years)):
            s = _true_s(scenario, j)
            drho_true = float(rho[year - scenario.year_start] - rho[year - 1 - scenario.year_start])
            dz = drho_true + combined_sd(s, sigma) * rng.standard_normal()
            # an extreme tau draw could push |dz| past the rate bound; clip
            # rather than abort, and rely on test scenarios staying far away
            dz = float(np.clip(dz, -0.999, 0.999))
            emu.append(
                EmuObservation(
                    country_id=country,
                    data_type=dtype,
                    year=int(year),
                    kind=ObservationKind.RATE,
                    value=dz,
                    sd=s,
                    target_groups=frozenset({scenario.group}),
                    selected=True,
                )
            )
            training.append(
                TrainingRecord(
                    country_id=country,
                    data_type=dtype,
                    year=int(year),
                    dz_star=dz,
                    s=s,
                    drho_star=drho_true,
                )
            )

    data = SynthData(
        scenario=scenario,
        years=years,
        trajectories=trajectories,
        surveys=surveys,
        emu=emu,
        training=training,
        sigma_truth=sigma_truth,
    )
    if out_dir is not None:
        write_synth(data, out_dir)
    return data


def write_synth(data: SynthData, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_surveys_csv(data.surveys, out / "surveys.csv")
    write_emu_csv(data.emu, out / "emu.csv")
    write_training_csv(data.training, out / "training.csv")
    lines = ["country_id,year,rho"]
    for country, rho in sorted(data.trajectories.items()):
        for year, value in zip(data.years, rho):
            lines.append(f"{country},{int(year)},{value:.8f}")
    (out / "trajectories.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    truth = json.dumps(data.truth_payload(), indent=2, sort_keys=True) + "\n"
    (out / "truth.json").write_text(truth, encoding="utf-8")


def recovery_experiment(
    scenario: SynthScenario,
    config: SamplerConfig,
    country_config: SamplerConfig | None = None,
) -> dict:
    """Generate, refit, and score the full pipeline against the known truth.

    Reports hyperparameter recovery z-scores, held-out coverage, and the
    survey-only versus survey+EMU RMSE comparison. Scenarios with a trend
    break are deliberately misspecified for the constant-drift model; they
    get the same report but no pass/fail verdict.
    """
    from fp_estim.validate import run_validation

    if scenario.n_countries < 10 or len(scenario.emu_years) * scenario.n_countries < 150:
        raise ValueError(
            "recovery needs >= 10 countries and >= 150 training rows for identification"
        )
    data = generate(scenario)
    hyper_fit = fit_hyper(data.training, config)

    theta_z = {}
    for d in DataType:
        est = hyper_fit.estimates.types[d]
        truth = scenario.theta[int(d) - 1]
        theta_z[d.label] = (est.theta_hat - truth) / est.theta_sd
    tau_hat = hyper_fit.estimates.tau_hat

    outcome = run_validation(
        data.surveys,
        data.emu,
        hyper_fit.estimates,
        country_config if country_config is not None else config,
    )
    rmse = {row.model: row.rmse for row in outcome.rows if row.group == scenario.group}
    coverage = {row.model: row.coverage for row in outcome.rows if row.group == scenario.group}

    misspecified = scenario.trend_break is not None
    report = {
        "misspecified": misspecified,
        "theta_z": theta_z,
        "tau_hat": tau_hat,
        "tau_truth": scenario.tau,
        "coverage": coverage,
        "rmse": rmse,
        "n_cases": len(outcome.cases) // 2,
        "warnings": outcome.warnings,
    }
    if misspecified:
        report["passed"] = None
    else:
        # coverage is reported but not gated here; calibrating it takes far
        # more held-out points than one scenario provides
        report["passed"] = (
            all(abs(z) <= 2.0 for z in theta_z.values())
            and 0.5 * scenario.tau < tau_hat < 2.0 * scenario.tau
        )
    return report
