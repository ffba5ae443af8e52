"""Hierarchical variance model for EMU rates of change around mCPR rates.

Each (country, data type) pair carries a latent extra standard deviation
sigma that inflates the observed sampling noise; log sigma values are pooled
within a data type around a type-level mean theta_d, with a shared
cross-country spread tau. Fitting a multi-country training set yields the
plug-in point estimates used by the country-level model.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from fp_estim.core import (
    DataType,
    EmuObservation,
    HyperEstimates,
    ObservationKind,
    ParseError,
    TypeEstimate,
    derive_seed,
    half_cauchy_logpdf,
    normal_logpdf,
    parse_field,
    read_delimited,
)
from fp_estim.mcmc import ConvergenceError, PosteriorDraws, SamplerConfig, sample

logger = logging.getLogger(__name__)

THETA_PRIOR_SD = 2.0
TAU_PRIOR_SCALE = 1.0

RHAT_WARN = 1.05
RHAT_FAIL = 1.1


class IdentifiabilityError(Exception):
    """Too few (country, type) pairs to separate within- from between-country variance."""


class JoinError(Exception):
    """EMU years retained for training lack a matching mCPR rate-of-change estimate."""


@dataclass(frozen=True)
class TrainingRecord:
    """One training triple: an EMU annual rate, its sd, and the matching mCPR rate."""

    country_id: str
    data_type: DataType
    year: int
    dz_star: float
    s: float
    drho_star: float

    def __post_init__(self) -> None:
        if not self.country_id:
            raise ValueError("country_id must be nonempty")
        if not self.s >= 0.0:
            raise ValueError(f"s must be nonnegative, got {self.s}")
        for name in ("dz_star", "s", "drho_star"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def build_training_set(
    emu_rates: Sequence[EmuObservation],
    mcpr_estimates: Mapping[str, Mapping[int, float]],
    survey_years: Mapping[str, float],
) -> list[TrainingRecord]:
    """Join EMU rates to mCPR rate estimates, keeping pre-survey years only.

    A rate is retained when its year lies strictly before the country's most
    recent survey year; countries with no survey year are dropped entirely.
    Every retained year must have a matching mCPR estimate or the join fails.
    """
    if not emu_rates:
        logger.warning("empty EMU input; training set is empty")
        return []

    records = []
    missing = []
    for obs in emu_rates:
        if obs.kind is not ObservationKind.RATE:
            raise ValueError(f"expected rate observations, got {obs.kind.value}")
        last_survey = survey_years.get(obs.country_id)
        if last_survey is None:
            logger.warning("country %s has no survey year; dropped", obs.country_id)
            continue
        if not obs.year < last_survey:
            continue
        drho = mcpr_estimates.get(obs.country_id, {}).get(obs.year)
        if drho is None:
            missing.append((obs.country_id, obs.year))
            continue
        records.append(
            TrainingRecord(
                country_id=obs.country_id,
                data_type=obs.data_type,
                year=obs.year,
                dz_star=obs.value,
                s=obs.sd,
                drho_star=drho,
            )
        )
    if missing:
        raise JoinError(f"EMU years lacking a matching mCPR rate estimate: {missing}")

    records.sort(key=lambda r: (r.country_id, int(r.data_type), r.year))
    counts = Counter((r.country_id, r.data_type.label) for r in records)
    for (country, label), n in sorted(counts.items()):
        logger.info("training records: %s %s -> %d", country, label, n)
    return records


class HyperModel:
    """Joint posterior over type means, cross-country spread, and pair sigmas.

    The parameter vector is [theta_1..theta_4, log tau, log sigma per pair],
    pairs sorted by (country, type). Pairs named in ``extra_pairs`` get a
    sigma parameter even without training records, which exposes their
    conditional prior for shrinkage checks.
    """

    def __init__(
        self,
        records: Sequence[TrainingRecord],
        extra_pairs: Iterable[tuple[str, DataType]] = (),
    ) -> None:
        self.records = list(records)
        pair_set = {(r.country_id, r.data_type) for r in self.records}
        pair_set.update((c, DataType(d)) for c, d in extra_pairs)
        self.pairs = sorted(pair_set, key=lambda p: (p[0], int(p[1])))
        pair_pos = {p: i for i, p in enumerate(self.pairs)}

        self._rec_pair = np.array(
            [pair_pos[(r.country_id, r.data_type)] for r in self.records], dtype=int
        )
        self._rec_resid = np.array([r.dz_star - r.drho_star for r in self.records])
        self._rec_s = np.array([r.s for r in self.records])
        self._pair_type = np.array([int(d) - 1 for _, d in self.pairs], dtype=int)

        self.names = (
            [f"theta_{int(d)}" for d in DataType]
            + ["log_tau"]
            + [f"log_sigma_{c}_{int(d)}" for c, d in self.pairs]
        )
        self.dim = len(self.names)

    def log_posterior(self, X: np.ndarray) -> np.ndarray:
        """Vectorized over chains: maps (chains, dim) to (chains,)."""
        X = np.atleast_2d(X)
        theta = X[:, :4]
        log_tau = X[:, 4]
        tau = np.exp(log_tau)
        log_sig = X[:, 5:]

        lp = normal_logpdf(theta, 0.0, THETA_PRIOR_SD).sum(axis=1)
        # log-scale tau parameterization carries a +log tau Jacobian
        lp = lp + half_cauchy_logpdf(tau, TAU_PRIOR_SCALE) + log_tau
        lp = lp + normal_logpdf(
            log_sig, theta[:, self._pair_type], tau[:, None]
        ).sum(axis=1)

        if self.records:
            sig = np.exp(log_sig[:, self._rec_pair])
            sd = np.hypot(self._rec_s[None, :], sig)
            lp = lp + normal_logpdf(self._rec_resid[None, :], 0.0, sd).sum(axis=1)
        return lp

    def initial_points(self, n_chains: int, seed: int) -> np.ndarray:
        base = np.concatenate(
            [np.full(4, -3.5), [math.log(0.8)], np.full(len(self.pairs), -3.5)]
        )
        rng = np.random.default_rng(derive_seed(seed, "hyper-init"))
        return base[None, :] + rng.normal(scale=0.5, size=(n_chains, base.size))


@dataclass
class HyperFit:
    """Fitted hyperparameters together with the posterior they came from."""

    estimates: HyperEstimates
    draws: PosteriorDraws
    pairs: list[tuple[str, DataType]]
    warnings: list[str]

    def log_sigma_draws(self, country_id: str, data_type: DataType) -> np.ndarray:
        return self.draws.stacked(f"log_sigma_{country_id}_{int(data_type)}")

    def sigma_draws(self, country_id: str, data_type: DataType) -> np.ndarray:
        return np.exp(self.log_sigma_draws(country_id, data_type))

    def theta_draws(self, data_type: DataType) -> np.ndarray:
        return self.draws.stacked(f"theta_{int(data_type)}")

    def tau_draws(self) -> np.ndarray:
        return np.exp(self.draws.stacked("log_tau"))


def fit_hyper(
    records: Sequence[TrainingRecord],
    config: SamplerConfig,
    extra_pairs: Iterable[tuple[str, DataType]] = (),
) -> HyperFit:
    """Sample the hierarchical model and summarize into plug-in estimates.

    Point estimates are posterior medians (invariant under the log
    transform); the per-type interval is the 2.5/97.5 percentile range of
    exp(theta_d), on the proportion scale. Types absent from the training
    data keep their prior and are flagged.
    """
    distinct_pairs = {(r.country_id, r.data_type) for r in records}
    if len(distinct_pairs) < 2:
        raise IdentifiabilityError(
            "need records for at least 2 distinct (country, type) pairs to "
            f"identify the cross-country spread, got {len(distinct_pairs)}"
        )

    model = HyperModel(records, extra_pairs)

    # one deterministic retry with longer chains before giving up, as unlucky
    # seeds occasionally trip the hard gate on the slow-mixing tau coordinate
    retry_notes = []
    attempt_config = config
    for attempt in range(2):
        inits = model.initial_points(attempt_config.n_chains, attempt_config.seed)
        draws = sample(
            model.log_posterior,
            inits,
            attempt_config,
            names=model.names,
            vectorized=True,
            init_scales=0.2,
        )
        failed = []
        warns = []
        for j in range(5):
            r = draws.rhat[j]
            if r > RHAT_FAIL:
                failed.append(f"{model.names[j]}: R-hat {r:.3f}")
            elif r > RHAT_WARN:
                warns.append(f"{model.names[j]}: R-hat {r:.3f} above {RHAT_WARN}")
        if not failed:
            break
        if attempt == 0:
            msg = "retrying with doubled chains after R-hat gate: " + "; ".join(failed)
            retry_notes.append(msg)
            logger.warning(msg)
            attempt_config = replace(
                config,
                n_warmup=2 * config.n_warmup,
                n_samples=2 * config.n_samples,
                seed=derive_seed(config.seed, "retry"),
            )
        else:
            raise ConvergenceError(
                "hyperparameter chains did not converge: " + "; ".join(failed)
            )
    warns = retry_notes + warns
    for msg in warns:
        if msg not in retry_notes:
            logger.warning(msg)

    counts = Counter(r.data_type for r in records)
    types = {}
    for d in DataType:
        col = draws.stacked(f"theta_{int(d)}")
        exp_col = np.exp(col)
        n_obs = counts.get(d, 0)
        types[d] = TypeEstimate(
            theta_hat=float(np.median(col)),
            theta_sd=float(col.std(ddof=1)),
            ci_low=float(np.percentile(exp_col, 2.5)),
            ci_high=float(np.percentile(exp_col, 97.5)),
            n_obs=n_obs,
            from_prior=n_obs == 0,
        )
    tau_hat = float(np.median(np.exp(draws.stacked("log_tau"))))
    estimates = HyperEstimates(types=types, tau_hat=tau_hat)
    return HyperFit(estimates=estimates, draws=draws, pairs=model.pairs, warnings=warns)


TRAINING_COLUMNS = ("country_id", "data_type", "year", "dz_star", "s", "drho_star")


def read_training_csv(path) -> list[TrainingRecord]:
    """Load a training table of EMU rates joined to mCPR rate estimates."""
    records = []
    for line_no, row in read_delimited(path, TRAINING_COLUMNS):
        code = parse_field(row["data_type"], int, path, line_no, "data_type")
        try:
            dtype = DataType(code)
        except ValueError:
            raise ParseError(
                path, line_no, f"unknown data_type code {code}", column="data_type"
            ) from None
        try:
            records.append(
                TrainingRecord(
                    country_id=row["country_id"],
                    data_type=dtype,
                    year=parse_field(row["year"], int, path, line_no, "year"),
                    dz_star=parse_field(row["dz_star"], float, path, line_no, "dz_star"),
                    s=parse_field(row["s"], float, path, line_no, "s"),
                    drho_star=parse_field(
                        row["drho_star"], float, path, line_no, "drho_star"
                    ),
                )
            )
        except ValueError as exc:
            raise ParseError(path, line_no, str(exc)) from None
    return records


def write_training_csv(records: Sequence[TrainingRecord], path) -> None:
    lines = [",".join(TRAINING_COLUMNS)]
    for r in records:
        lines.append(
            f"{r.country_id},{int(r.data_type)},{r.year},"
            f"{r.dz_star:.6f},{r.s:.6f},{r.drho_star:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def hyper_to_json(estimates: HyperEstimates) -> str:
    """Serialize plug-in hyperparameters; inverse of :func:`read_hyper_json`."""
    payload = {
        "tau_hat": estimates.tau_hat,
        "types": {
            str(int(d)): {
                "theta_hat": t.theta_hat,
                "theta_sd": t.theta_sd,
                "ci_low": t.ci_low,
                "ci_high": t.ci_high,
                "n_obs": t.n_obs,
            }
            for d, t in sorted(estimates.types.items())
        },
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_hyper_json(estimates: HyperEstimates, path) -> None:
    Path(path).write_text(hyper_to_json(estimates), encoding="utf-8")


def read_hyper_json(path) -> HyperEstimates:
    """Load hyperparameters written by :func:`write_hyper_json` or shipped defaults."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read file: {exc.strerror or exc}")
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}")

    try:
        tau_hat = float(payload["tau_hat"])
        types = {}
        for key, entry in payload["types"].items():
            d = DataType(int(key))
            types[d] = TypeEstimate(
                theta_hat=float(entry["theta_hat"]),
                theta_sd=float(entry["theta_sd"]),
                ci_low=float(entry["ci_low"]),
                ci_high=float(entry["ci_high"]),
                n_obs=int(entry["n_obs"]),
                from_prior=int(entry["n_obs"]) == 0,
            )
        return HyperEstimates(types=types, tau_hat=tau_hat)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, 1, f"bad hyperparameters payload: {exc}") from None


TYPE_TABLE_COLUMNS = ("data_type", "n", "theta_hat", "theta_sd", "ci_low", "ci_high")


def write_type_table_csv(estimates: HyperEstimates, path) -> None:
    """Per-type summary table: label, record count, log-scale point estimate
    and SD, and the back-transformed 95% interval, all at two decimals."""
    lines = [",".join(TYPE_TABLE_COLUMNS)]
    for d in DataType:
        t = estimates.types[d]
        lines.append(
            f"{d.label},{t.n_obs},{t.theta_hat:.2f},{t.theta_sd:.2f},"
            f"{t.ci_low:.2f},{t.ci_high:.2f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def default_hyperparameters() -> HyperEstimates:
    """The package's shipped plug-in values, for runs without a training fit."""
    ref = resources.files("fp_estim").joinpath("data/default_hyperparameters.json")
    with resources.as_file(ref) as path:
        return read_hyper_json(path)
