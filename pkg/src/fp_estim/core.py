"""Domain types, transforms, and densities shared by every other module.

Everything here is a pure function or an immutable record type; all of it is
safe to call concurrently.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

T = TypeVar("T")


class ParseError(Exception):
    """A malformed input file, pinned to the offending file, line, and column."""

    def __init__(self, path, line: int, message: str, column: str | None = None):
        self.path = str(path)
        self.line = line
        self.column = column
        where = f"{self.path}:{line}"
        if column is not None:
            where += f": column '{column}'"
        super().__init__(f"{where}: {message}")


class DataType(IntEnum):
    """Service-statistics data type, with the stable integer codes used in files."""

    EMU_CLIENTS = 1
    EMU_FACILITIES = 2
    FP_VISITS = 3
    FP_USERS = 4

    @property
    def label(self) -> str:
        return _TYPE_LABELS[self]


_TYPE_LABELS = {
    DataType.EMU_CLIENTS: "EMU-clients",
    DataType.EMU_FACILITIES: "EMU-facilities",
    DataType.FP_VISITS: "FP visits",
    DataType.FP_USERS: "FP users",
}


class PopulationGroup(str, Enum):
    """Marital-status population group."""

    MWRA = "MWRA"
    UWRA = "UWRA"
    AWRA = "AWRA"


class ObservationKind(str, Enum):
    LEVEL = "level"
    RATE = "rate"


@dataclass(frozen=True)
class EmuObservation:
    """One EMU level or annual rate-of-change observation with its uncertainty.

    Levels are proportions in [0, 1]; rates are annual changes in proportion
    per year, in [-1, 1]. ``sd`` is on the same scale as ``value``.
    """

    country_id: str
    data_type: DataType
    year: int
    kind: ObservationKind
    value: float
    sd: float
    target_groups: frozenset[PopulationGroup]
    selected: bool = False

    def __post_init__(self) -> None:
        if not self.country_id:
            raise ValueError("country_id must be nonempty")
        if self.kind is ObservationKind.LEVEL and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"level value {self.value} outside [0, 1]")
        if self.kind is ObservationKind.RATE and not -1.0 <= self.value <= 1.0:
            raise ValueError(f"rate value {self.value} outside [-1, 1]")
        if not self.sd >= 0.0:
            raise ValueError(f"sd must be nonnegative, got {self.sd}")
        if not self.target_groups:
            raise ValueError("target_groups must be nonempty")


@dataclass(frozen=True)
class SurveyObservation:
    """One survey observation of mCPR for a country and population group.

    Boundary proportions 0 and 1 are rejected (not clamped) so the logit
    transform stays well defined; clean the data upstream instead.
    """

    country_id: str
    group: PopulationGroup
    year: float
    value: float
    se: float
    source_id: str = ""

    def __post_init__(self) -> None:
        if not self.country_id:
            raise ValueError("country_id must be nonempty")
        if not 0.0 < self.value < 1.0:
            raise ValueError(f"survey value {self.value} outside (0, 1)")
        if not self.se > 0.0:
            raise ValueError(f"survey se must be positive, got {self.se}")


@dataclass(frozen=True)
class TypeEstimate:
    """Plug-in uncertainty summary for one data type.

    ``theta_hat`` and ``theta_sd`` are on the log-proportion scale;
    ``ci_low``/``ci_high`` bound exp(theta) on the proportion scale.
    """

    theta_hat: float
    theta_sd: float
    ci_low: float
    ci_high: float
    n_obs: int
    from_prior: bool = False

    def __post_init__(self) -> None:
        if not self.theta_sd > 0.0:
            raise ValueError("theta_sd must be positive")
        if not self.ci_low < self.ci_high:
            raise ValueError("ci_low must be below ci_high")
        if self.n_obs < 0:
            raise ValueError("n_obs must be nonnegative")


@dataclass(frozen=True)
class HyperEstimates:
    """Per-data-type variance hyperparameters plus the cross-country spread."""

    types: dict[DataType, TypeEstimate]
    tau_hat: float

    def __post_init__(self) -> None:
        if not self.tau_hat > 0.0:
            raise ValueError("tau_hat must be positive")
        missing = [d for d in DataType if d not in self.types]
        if missing:
            raise ValueError(f"missing data types: {[d.name for d in missing]}")

    def prior_median_sigma(self, data_type: DataType) -> float:
        """Median of the plug-in prior for sigma, exp(theta_hat)."""
        return math.exp(self.types[data_type].theta_hat)


def logit(p):
    """Log-odds of a proportion strictly inside (0, 1). Accepts arrays."""
    arr = np.asarray(p, dtype=float)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValueError("logit requires 0 < p < 1")
    out = np.log(arr) - np.log1p(-arr)
    return float(out) if np.ndim(p) == 0 else out


def inverse_logit(x):
    """Inverse of :func:`logit`, numerically stable for large |x|."""
    arr = np.asarray(x, dtype=float)
    out = np.empty_like(arr)
    pos = arr >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if np.ndim(x) == 0 else out


def delta_method_se(p: float, se_p: float) -> float:
    """Standard error on the logit scale for a proportion with standard error se_p."""
    if not 0.0 < p < 1.0:
        raise ValueError("delta_method_se requires 0 < p < 1")
    if not se_p > 0.0:
        raise ValueError("delta_method_se requires se_p > 0")
    return se_p / (p * (1.0 - p))


def combined_sd(s_obs, sigma_cd):
    """Total standard deviation from two independent components, sqrt(s^2 + sigma^2).

    A zero result is a degenerate total SD; callers must reject it before
    building a likelihood.
    """
    s = np.asarray(s_obs, dtype=float)
    g = np.asarray(sigma_cd, dtype=float)
    if np.any(s < 0.0) or np.any(g < 0.0):
        raise ValueError("combined_sd requires nonnegative arguments")
    out = np.hypot(s, g)
    return float(out) if np.ndim(s_obs) == 0 and np.ndim(sigma_cd) == 0 else out


def half_cauchy_logpdf(x, scale):
    """Log density of the half-Cauchy distribution on [0, inf); -inf outside support."""
    if not np.all(np.asarray(scale) > 0.0):
        raise ValueError("half_cauchy_logpdf requires scale > 0")
    arr = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = math.log(2.0 / math.pi) - np.log(scale) - np.log1p((arr / scale) ** 2)
    out = np.where(arr < 0.0, -np.inf, out)
    return float(out) if np.ndim(x) == 0 else out


def normal_logpdf(x, mean, sd):
    """Normal log density; -inf wherever sd <= 0 (degenerate scale)."""
    xa = np.asarray(x, dtype=float)
    sa = np.asarray(sd, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = -0.5 * LOG_2PI - np.log(sa) - 0.5 * ((xa - mean) / sa) ** 2
    out = np.where(sa > 0.0, out, -np.inf)
    scalar = np.ndim(x) == 0 and np.ndim(mean) == 0 and np.ndim(sd) == 0
    return float(out) if scalar else out


def rate_of_change(levels: Sequence[EmuObservation]) -> list[EmuObservation]:
    """Difference consecutive annual EMU levels into rate observations.

    Only year pairs with a gap of exactly one produce a rate; gaps are never
    bridged. The combined sd assumes independent errors between the two years,
    the wider choice when the covariance is unknown. The rate inherits the
    later year's target groups and selected flag.
    """
    if not levels:
        return []
    country = levels[0].country_id
    dtype = levels[0].data_type
    years = [obs.year for obs in levels]
    for obs in levels:
        if obs.kind is not ObservationKind.LEVEL:
            raise ValueError("rate_of_change expects level observations")
        if obs.country_id != country or obs.data_type != dtype:
            raise ValueError("rate_of_change expects one country and data type")
    if sorted(years) != years or len(set(years)) != len(years):
        raise ValueError("levels must be sorted by year with unique years")

    rates = []
    for prev, cur in zip(levels, levels[1:]):
        if cur.year - prev.year != 1:
            continue
        rates.append(
            EmuObservation(
                country_id=country,
                data_type=dtype,
                year=cur.year,
                kind=ObservationKind.RATE,
                value=cur.value - prev.value,
                sd=math.hypot(prev.sd, cur.sd),
                target_groups=cur.target_groups,
                selected=cur.selected,
            )
        )
    return rates


def read_delimited(path, required_columns: Sequence[str]) -> list[tuple[int, dict[str, str]]]:
    """Read a headed CSV, returning (line_number, row dict) pairs.

    Line numbers are 1-based file lines (the header is line 1) so error
    messages point at the actual file location. Missing or extra header
    columns and short rows are rejected up front.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read file: {exc.strerror or exc}")
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(path, 1, "empty file, expected a header row") from None
    header = [h.strip() for h in header]
    missing = [c for c in required_columns if c not in header]
    if missing:
        raise ParseError(path, 1, f"missing required columns: {', '.join(missing)}")

    rows = []
    for line_no, values in enumerate(reader, start=2):
        if not values or all(not v.strip() for v in values):
            continue
        if len(values) != len(header):
            raise ParseError(
                path, line_no, f"expected {len(header)} fields, got {len(values)}"
            )
        rows.append((line_no, {h: v.strip() for h, v in zip(header, values)}))
    return rows


def parse_field(raw: str, convert: Callable[[str], T], path, line: int, column: str) -> T:
    """Convert one CSV field, turning conversion failures into ParseError."""
    try:
        return convert(raw)
    except (ValueError, KeyError) as exc:
        raise ParseError(path, line, f"bad value {raw!r}: {exc}", column=column) from None


def derive_seed(base_seed: int, *parts) -> int:
    """Stable 63-bit seed derived from a base seed and arbitrary string-able parts.

    Used to give every (country, group, chain, ...) job its own reproducible
    RNG stream.
    """
    h = hashlib.sha256()
    h.update(str(int(base_seed)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1
