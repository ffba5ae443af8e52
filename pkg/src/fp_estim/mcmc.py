"""Adaptive random-walk Metropolis-within-Gibbs with convergence diagnostics.

The sampler updates one coordinate at a time across all chains simultaneously,
so a target density written against a (chains, dim) parameter block is
evaluated once per coordinate sweep instead of once per chain. All randomness
is pre-drawn from per-chain generator streams, which makes output bitwise
reproducible for a given (seed, init, config) regardless of how the target is
vectorized.

Proposal scales adapt multiplicatively toward a per-coordinate acceptance
target during warmup only and are frozen afterward.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

SCALE_FLOOR = 1e-8
SCALE_CEIL = 1e2


class InitializationError(Exception):
    """The log posterior is not finite at one of the chain starting points."""


class DivergenceError(Exception):
    """Every proposal in an adaptation window was rejected with the scale at its floor."""


class ConvergenceError(Exception):
    """Chains disagree badly enough (R-hat above the hard limit) to abort."""


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 2000
    n_samples: int = 2000
    seed: int = 0
    target_accept: float = 0.44
    adapt_window: int = 50

    def __post_init__(self) -> None:
        if self.n_chains < 1 or self.n_warmup < 1 or self.n_samples < 1:
            raise ValueError("chain, warmup, and sample counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def with_seed(self, seed: int) -> "SamplerConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class Interweave:
    """Optional second parameterization swept after the primary one each iteration.

    ``to_alt``/``from_alt`` map whole (chains, dim) blocks between the primary
    and alternate coordinates (a bijection of the same dimension);
    ``log_posterior`` is the density in alternate coordinates, including its
    own Jacobian terms. Alternating coordinate sweeps across two
    parameterizations breaks ridges that stall either one alone.
    """

    log_posterior: Callable
    to_alt: Callable
    from_alt: Callable
    init_scales: object = 0.1


@dataclass
class PosteriorDraws:
    """Post-warmup draws plus per-parameter diagnostics.

    ``draws`` has shape (chains, samples, parameters); every stored draw has a
    finite log posterior by construction.
    """

    names: list[str]
    draws: np.ndarray
    log_post: np.ndarray
    accept_rates: np.ndarray
    rhat: np.ndarray = field(init=False)
    ess: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n_params = self.draws.shape[2]
        self.rhat = np.array([rhat(self.draws[:, :, j]) for j in range(n_params)])
        self.ess = np.array([ess(self.draws[:, :, j]) for j in range(n_params)])

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_samples(self) -> int:
        return self.draws.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def stacked(self, name: str | None = None) -> np.ndarray:
        """All chains concatenated: (chains*samples, params), or one column by name."""
        flat = self.draws.reshape(-1, self.draws.shape[2])
        if name is None:
            return flat
        return flat[:, self.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "iteration", "parameter", "value"])
            for c in range(self.n_chains):
                for s in range(self.n_samples):
                    row = self.draws[c, s]
                    for j, name in enumerate(self.names):
                        writer.writerow([c, s, name, repr(float(row[j]))])


def _sanitize(lp: np.ndarray) -> np.ndarray:
    return np.where(np.isnan(lp), -np.inf, lp)


def _coordinate_sweep(lp_fn, X, lp, z_row, logu_row, scales, accept_buf) -> np.ndarray:
    """One Metropolis update of every coordinate across all chains, in place."""
    for j in range(X.shape[1]):
        cur = X[:, j].copy()
        X[:, j] = cur + scales[:, j] * z_row[:, j]
        lp_new = _sanitize(np.asarray(lp_fn(X), dtype=float))
        accept = logu_row[:, j] < lp_new - lp
        X[~accept, j] = cur[~accept]
        lp = np.where(accept, lp_new, lp)
        accept_buf[:, j] += accept
    return lp


def _adapt_scales(scales, window_accepts, adapt_count, config, param_names, label):
    stuck = (window_accepts == 0) & (scales <= SCALE_FLOOR * (1 + 1e-12))
    if np.any(stuck):
        c, j = np.argwhere(stuck)[0]
        raise DivergenceError(
            f"chain {c} {label}parameter {param_names[j]}: no accepted proposal "
            f"over a full adaptation window with scale at the floor"
        )
    gamma = min(1.0, 3.0 / math.sqrt(adapt_count))
    rates = window_accepts / config.adapt_window
    scales *= np.exp(gamma * (rates - config.target_accept))
    np.clip(scales, SCALE_FLOOR, SCALE_CEIL, out=scales)
    window_accepts[:] = 0.0


def sample(
    log_posterior: Callable,
    inits: np.ndarray,
    config: SamplerConfig,
    *,
    names: Sequence[str] | None = None,
    vectorized: bool = False,
    init_scales=0.1,
    interweave: Interweave | None = None,
) -> PosteriorDraws:
    """Draw from a log posterior starting each chain at its own init point.

    ``inits`` has shape (n_chains, dim) and the rows must be distinct
    (overdispersed starts are what make R-hat meaningful). A vectorized target
    maps a (chains, dim) block to a length-chains vector; a plain target maps
    one parameter vector to a scalar and is wrapped internally.

    With ``interweave`` set, each iteration also sweeps the alternate
    parameterization (always treated as vectorized); draws are stored in the
    primary coordinates either way.
    """
    inits = np.asarray(inits, dtype=float)
    if inits.ndim != 2 or inits.shape[0] != config.n_chains:
        raise ValueError(f"inits must have shape ({config.n_chains}, dim)")
    n_chains, dim = inits.shape
    if n_chains > 1 and len({tuple(row) for row in inits}) < n_chains:
        raise ValueError("chain inits must be distinct")
    if names is not None and len(names) != dim:
        raise ValueError("names length must match parameter dimension")
    param_names = list(names) if names is not None else [f"p{j}" for j in range(dim)]

    if vectorized:
        lp_fn = log_posterior
    else:
        def lp_fn(block):
            return np.array([log_posterior(x) for x in block], dtype=float)

    X = inits.copy()
    lp = np.asarray(lp_fn(X), dtype=float)
    if lp.shape != (n_chains,):
        raise ValueError("log posterior must return one value per chain")
    if not np.all(np.isfinite(lp)):
        bad = np.flatnonzero(~np.isfinite(lp)).tolist()
        raise InitializationError(f"non-finite log posterior at init for chains {bad}")

    scales = np.broadcast_to(np.asarray(init_scales, dtype=float), (n_chains, dim)).copy()
    np.clip(scales, SCALE_FLOOR, SCALE_CEIL, out=scales)
    if interweave is not None:
        alt_scales = np.broadcast_to(
            np.asarray(interweave.init_scales, dtype=float), (n_chains, dim)
        ).copy()
        np.clip(alt_scales, SCALE_FLOOR, SCALE_CEIL, out=alt_scales)

    n_iter = config.n_warmup + config.n_samples
    # One generator stream per chain; all normal and uniform variates are
    # drawn up front so results do not depend on evaluation order.
    n_blocks = 1 if interweave is None else 2
    Z = np.empty((n_blocks, n_chains, n_iter, dim))
    logU = np.empty((n_blocks, n_chains, n_iter, dim))
    for c in range(n_chains):
        rng = np.random.default_rng([config.seed, c])
        Z[0, c] = rng.standard_normal((n_iter, dim))
        logU[0, c] = np.log(rng.random((n_iter, dim)))
        if interweave is not None:
            Z[1, c] = rng.standard_normal((n_iter, dim))
            logU[1, c] = np.log(rng.random((n_iter, dim)))

    draws = np.empty((n_chains, config.n_samples, dim))
    log_post = np.empty((n_chains, config.n_samples))
    window_accepts = np.zeros((n_chains, dim))
    alt_window_accepts = np.zeros((n_chains, dim))
    alt_scratch = np.zeros((n_chains, dim))
    post_accepts = np.zeros((n_chains, dim))
    adapt_count = 0

    for t in range(n_iter):
        in_warmup = t < config.n_warmup
        accept_buf = window_accepts if in_warmup else post_accepts
        lp = _coordinate_sweep(
            lp_fn, X, lp, Z[0, :, t], logU[0, :, t], scales, accept_buf
        )

        if interweave is not None:
            Xb = np.asarray(interweave.to_alt(X), dtype=float)
            lp_b = _sanitize(np.asarray(interweave.log_posterior(Xb), dtype=float))
            alt_buf = alt_window_accepts if in_warmup else alt_scratch
            lp_b = _coordinate_sweep(
                interweave.log_posterior, Xb, lp_b, Z[1, :, t], logU[1, :, t],
                alt_scales, alt_buf,
            )
            X = np.asarray(interweave.from_alt(Xb), dtype=float)
            lp = _sanitize(np.asarray(lp_fn(X), dtype=float))

        if in_warmup and (t + 1) % config.adapt_window == 0:
            adapt_count += 1
            _adapt_scales(scales, window_accepts, adapt_count, config, param_names, "")
            if interweave is not None:
                _adapt_scales(
                    alt_scales, alt_window_accepts, adapt_count, config,
                    param_names, "alternate ",
                )

        if not in_warmup:
            s = t - config.n_warmup
            draws[:, s, :] = X
            log_post[:, s] = lp

    accept_rates = post_accepts / config.n_samples
    return PosteriorDraws(
        names=param_names, draws=draws, log_post=log_post, accept_rates=accept_rates
    )


def _split_chains(draws: np.ndarray) -> np.ndarray:
    arr = np.asarray(draws, dtype=float)
    if arr.ndim != 2:
        raise ValueError("expected a (chains, iterations) array")
    m, n = arr.shape
    if m < 2 or n < 4:
        raise ValueError("need at least 2 chains of at least 4 iterations")
    half = n // 2
    return np.concatenate([arr[:, :half], arr[:, half : 2 * half]], axis=0)


def rhat(draws: np.ndarray) -> float:
    """Split-chain potential scale reduction factor.

    Values at or below ~1.05 are treated as converged. If every draw is
    identical the statistic is undefined; 1.0 is returned by convention with a
    warning.
    """
    chains = _split_chains(draws)
    m, n = chains.shape
    chain_means = chains.mean(axis=1)
    chain_vars = chains.var(axis=1, ddof=1)
    w = chain_vars.mean()
    b = n * chain_means.var(ddof=1)
    if w == 0.0:
        warnings.warn("all draws identical; R-hat undefined, returning 1.0 by convention")
        return 1.0
    var_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(var_hat / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance (normalized by n) via FFT with zero padding."""
    n = len(x)
    centered = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centered, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n]
    return acov / n


def ess(draws: np.ndarray) -> float:
    """Effective sample size from the initial monotone sequence of autocorrelations.

    Paired autocorrelation sums are accumulated while positive and forced
    nonincreasing. Degenerate inputs (zero variance) yield NaN with a warning.
    """
    chains = _split_chains(draws)
    m, n = chains.shape
    acov = np.array([_autocov(c) for c in chains])
    chain_means = chains.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n + np.var(chain_means, ddof=1)
    if not var_plus > 0.0 or not np.isfinite(var_plus):
        warnings.warn("zero-variance draws; ESS undefined, returning NaN")
        return float("nan")

    rho = np.zeros(n)
    rho[0] = 1.0
    rho[1] = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho_even = rho[0]
    rho_odd = rho[1]
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0.0:
        rho[max_t + 1] = rho_even

    # force the paired sums to be nonincreasing
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    total = m * n
    tau = -1.0 + 2.0 * rho[: max_t + 2].sum()
    tau = max(tau, 1.0 / math.log10(total))
    return float(total / tau)
