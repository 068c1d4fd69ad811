"""
DriftLab - Assumption Diagnostics.

Checks the modeling assumptions behind the drift correction on retained
calibration outputs:
- marginal and joint Gaussianity of (eps_hat, delta) per coordinate
- off-diagonal correlations against a shuffled baseline
- channel-wise isotropy of the per-element variances
"""

from __future__ import annotations

import logging
import math
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

from src.app.toymodel import epsilon_array, quantize_array, sample_marginal
from src.core.config import NORMALITY_NULL_REPLICATES, RUN_BLOCK_SIZE
from src.core.domain.models import DataDistribution, NoiseInjectorSpec, NoiseSchedule
from src.core.domain.reports import (
    CorrelationBlock,
    CorrelationReport,
    GaussianityReport,
    IsotropyRow,
    MarginalFit,
    RetainedSamples,
)
from src.core.domain.statistics import merge_moments
from src.core.exceptions import (
    ConfigurationError,
    InsufficientSamplesError,
    StepIndexError,
)
from src.infra.utils.rng import stream


logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.9, 0.5, 0.1)
MIN_GAUSSIANITY_SAMPLES = 100
NULL_SAMPLE_CAP = 1000
PAIR_CHUNK = 512


def default_timesteps(steps: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> list[int]:
    """Step indices nearest (1 - f) * (M - 1), high-noise first, deduplicated."""
    chosen: list[int] = []
    for f in fractions:
        index = int(np.rint((1.0 - f) * (steps - 1)))
        if index not in chosen:
            chosen.append(index)
    return chosen


# -----------------------------------------------------------------------------
# Retention
# -----------------------------------------------------------------------------

def retain_diagnostic_samples(
    dist: DataDistribution,
    injector: Optional[NoiseInjectorSpec],
    schedule: NoiseSchedule,
    n_samples: int,
    seed: int,
    timesteps: Optional[Sequence[int]] = None,
    max_coordinates: int = 256,
) -> RetainedSamples:
    """
    Run the full-precision trajectory and keep raw outputs at up to 3 timesteps.

    Raw values are kept for a seeded coordinate subset; per-element variances
    are accumulated over all coordinates.
    """
    timesteps = tuple(default_timesteps(schedule.steps) if timesteps is None else timesteps)
    if not 1 <= len(timesteps) <= 3:
        raise ConfigurationError("Diagnostics retain between 1 and 3 timesteps", f"got {len(timesteps)}")
    for t in timesteps:
        schedule.check_step(t)
    if n_samples < 2:
        raise InsufficientSamplesError("diagnostic retention", 2, n_samples)

    d = dist.dimension
    n_coords = min(max_coordinates, d)
    coordinates = np.sort(stream(seed, "diagnostic-coordinates").choice(d, size=n_coords, replace=False))
    retained_e = {t: [] for t in timesteps}
    retained_d = {t: [] for t in timesteps}
    element_moments: dict[int, tuple] = {}

    alphas = schedule.alpha_array
    sb = schedule.sigma_bar_array
    block = RUN_BLOCK_SIZE
    last = max(timesteps)

    for b, start in enumerate(range(0, n_samples, block)):
        n = min(block, n_samples - start)
        rng = stream(seed, "diagnostics", b)
        x = alphas[0] * sample_marginal(dist, n, float(sb[0]), rng).values
        for k in range(last + 1):
            y = x / alphas[k]
            eps = epsilon_array(dist, y, float(sb[k]))
            eps_hat, delta = quantize_array(dist, injector, eps, float(sb[k]), k, rng)
            if k in retained_e:
                retained_e[k].append(eps_hat.reshape(n, -1)[:, coordinates])
                retained_d[k].append(delta.reshape(n, -1)[:, coordinates])
                batch = _element_moments(eps_hat, delta)
                element_moments[k] = batch if k not in element_moments else merge_moments(element_moments[k], batch)
            x = alphas[k + 1] * (y + (sb[k + 1] - sb[k]) * eps)

    def element_variance(m2: np.ndarray, count: np.ndarray) -> np.ndarray:
        return m2 / np.maximum(count - 1.0, 1.0)

    logger.info(f"🔬 Retained {n_samples} samples x {n_coords} coordinates at timesteps {list(timesteps)}")
    return RetainedSamples(
        timesteps=timesteps,
        coordinates=coordinates,
        layout=dist.layout,
        eps_hat={t: np.concatenate(retained_e[t]) for t in timesteps},
        delta={t: np.concatenate(retained_d[t]) for t in timesteps},
        element_var_eps_hat={t: element_variance(element_moments[t][3], element_moments[t][0]) for t in timesteps},
        element_var_delta={t: element_variance(element_moments[t][4], element_moments[t][0]) for t in timesteps},
        seed=seed,
    )


def _element_moments(eps_hat: np.ndarray, delta: np.ndarray) -> tuple[np.ndarray, ...]:
    """Per-element (count, means, m2s, comoment) over the sample axis, shaped (C, L)."""
    n = eps_hat.shape[0]
    mean_e = eps_hat.mean(axis=0)
    mean_d = delta.mean(axis=0)
    de = eps_hat - mean_e
    dd = delta - mean_d
    return (
        np.full(mean_e.shape, float(n)),
        mean_e,
        mean_d,
        (de * de).sum(axis=0),
        (dd * dd).sum(axis=0),
        (de * dd).sum(axis=0),
    )


def _retained_at(samples: RetainedSamples, timestep: int) -> tuple[np.ndarray, np.ndarray]:
    if timestep not in samples.eps_hat:
        raise StepIndexError(timestep, len(samples.timesteps))
    return samples.eps_hat[timestep], samples.delta[timestep]


# -----------------------------------------------------------------------------
# Off-Diagonal Correlations
# -----------------------------------------------------------------------------

def _standardize(columns: np.ndarray) -> np.ndarray:
    """Center columns and scale to unit norm; constant columns become zero."""
    centered = columns - columns.mean(axis=0, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=0, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms > 0.0, centered / norms, 0.0)


def _sample_pairs(n_coords: int, n_pairs: int, cross: bool, rng: np.random.Generator) -> np.ndarray:
    """Distinct coordinate pairs, without replacement; ordered i != j for cross blocks."""
    if cross:
        total = n_coords * (n_coords - 1)
        flat = rng.choice(total, size=n_pairs, replace=False)
        first = flat // (n_coords - 1)
        second = flat % (n_coords - 1)
        second = second + (second >= first)
        return np.stack([first, second], axis=1)
    upper_i, upper_j = np.triu_indices(n_coords, k=1)
    picks = rng.choice(len(upper_i), size=n_pairs, replace=False)
    return np.stack([upper_i[picks], upper_j[picks]], axis=1)


def shuffle_columns(columns: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Each column permuted independently over the sample axis; its multiset of values is unchanged."""
    return rng.permuted(columns, axis=0)


def offdiag_correlations(
    samples: RetainedSamples,
    timestep: int,
    block: CorrelationBlock,
    n_pairs: int,
    n_samples: int,
    seed: int,
) -> CorrelationReport:
    """|r| over random off-diagonal pairs and over the same pairs with one variable shuffled."""
    eps_hat, delta = _retained_at(samples, timestep)
    available = eps_hat.shape[0]
    if n_samples < 2 or n_samples > available:
        raise InsufficientSamplesError("off-diagonal correlations", n_samples, available)
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be >= 1", f"got {n_pairs}")

    first_var = delta if block == CorrelationBlock.ERROR else eps_hat
    second_var = eps_hat if block == CorrelationBlock.QUANT_OUTPUT else delta
    za = _standardize(first_var[:n_samples])
    zb = za if block != CorrelationBlock.CROSS else _standardize(second_var[:n_samples])

    n_coords = za.shape[1]
    cross = block == CorrelationBlock.CROSS
    total = n_coords * (n_coords - 1) if cross else n_coords * (n_coords - 1) // 2
    if total < 1:
        raise InsufficientSamplesError("coordinate pairs", 1, total)
    if n_pairs > total:
        logger.warning(f"⚠️ Requested {n_pairs} pairs but only {total} exist; using all")
        n_pairs = total

    pairs = _sample_pairs(n_coords, n_pairs, cross, stream(seed, f"pairs-{block.value}", timestep))
    shuffle_rng = stream(seed, f"shuffle-{block.value}", timestep)

    actual = np.empty(n_pairs)
    shuffled = np.empty(n_pairs)
    for start in range(0, n_pairs, PAIR_CHUNK):
        chunk = pairs[start:start + PAIR_CHUNK]
        left = za[:, chunk[:, 0]]
        right = zb[:, chunk[:, 1]]
        actual[start:start + len(chunk)] = np.abs(np.einsum("nk,nk->k", left, right))
        permuted = shuffle_columns(right, shuffle_rng)
        shuffled[start:start + len(chunk)] = np.abs(np.einsum("nk,nk->k", left, permuted))

    np.clip(actual, 0.0, 1.0, out=actual)
    np.clip(shuffled, 0.0, 1.0, out=shuffled)
    ks = stats.ks_2samp(actual, shuffled)
    coordinate_pairs = samples.coordinates[pairs]
    return CorrelationReport(
        timestep=timestep,
        block=block,
        pairs=coordinate_pairs,
        actual=actual,
        shuffled=shuffled,
        n_samples=n_samples,
        seed=seed,
        ks_statistic=float(ks.statistic),
        ks_pvalue=float(ks.pvalue),
    )


# -----------------------------------------------------------------------------
# Gaussianity
# -----------------------------------------------------------------------------

def _fitted_normal_distance(rows: np.ndarray) -> np.ndarray:
    """Sup-norm distance between each row's ECDF and its moment-fitted normal CDF."""
    n = rows.shape[1]
    ordered = np.sort(rows, axis=1)
    mean = ordered.mean(axis=1, keepdims=True)
    std = ordered.std(axis=1, ddof=1, keepdims=True)
    cdf = special.ndtr((ordered - mean) / std)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return np.maximum((upper - cdf).max(axis=1), (cdf - lower).max(axis=1))


@lru_cache(maxsize=64)
def normality_critical_value(n: int, level: float = 0.05) -> float:
    """
    Upper `level` quantile of the fitted-normal distance under the null.

    Simulated once per n; above NULL_SAMPLE_CAP the quantile is simulated at
    the cap and rescaled by sqrt(cap / n).
    """
    if n < MIN_GAUSSIANITY_SAMPLES:
        raise InsufficientSamplesError("normality critical value", MIN_GAUSSIANITY_SAMPLES, n)
    replicates = NORMALITY_NULL_REPLICATES
    n_sim = min(n, NULL_SAMPLE_CAP)
    rng = stream(0, "normality-null", n_sim)
    distances = np.concatenate([
        _fitted_normal_distance(rng.standard_normal((min(1000, replicates - start), n_sim)))
        for start in range(0, replicates, 1000)
    ])
    quantile = float(np.quantile(distances, 1.0 - level))
    return quantile * math.sqrt(n_sim / n)


def _marginal_fit(values: np.ndarray) -> MarginalFit:
    mean = float(values.mean())
    std = float(values.std(ddof=1))
    if std == 0.0:
        return MarginalFit(mean, 0.0, None, None, None, None, degenerate=True)
    distance = stats.kstest(values, "norm", args=(mean, std)).statistic
    return MarginalFit(
        mean=mean,
        std=std,
        skewness=float(stats.skew(values)),
        excess_kurtosis=float(stats.kurtosis(values)),
        cdf_distance=float(distance),
        critical_value=normality_critical_value(len(values)),
    )


def gaussianity_summary(samples: RetainedSamples, timestep: int, coordinate: int) -> GaussianityReport:
    """Marginal moments, fitted-normal distance and joint 2x2 Gaussian fit at one coordinate."""
    eps_hat, delta = _retained_at(samples, timestep)
    column = samples.position(coordinate)
    if column is None:
        raise ConfigurationError(f"Coordinate {coordinate} was not retained")
    n = eps_hat.shape[0]
    if n < MIN_GAUSSIANITY_SAMPLES:
        raise InsufficientSamplesError("gaussianity summary", MIN_GAUSSIANITY_SAMPLES, n)

    pair = np.stack([eps_hat[:, column], delta[:, column]])
    cov = np.cov(pair)
    scale = math.sqrt(cov[0, 0] * cov[1, 1])
    return GaussianityReport(
        timestep=timestep,
        coordinate=coordinate,
        n_samples=n,
        eps_hat=_marginal_fit(pair[0]),
        delta=_marginal_fit(pair[1]),
        joint_mean=pair.mean(axis=1),
        joint_cov=cov,
        joint_corr=float(cov[0, 1] / scale) if scale > 0.0 else None,
    )


# -----------------------------------------------------------------------------
# Isotropy
# -----------------------------------------------------------------------------

def channel_isotropy_summary(samples: RetainedSamples, timestep: int) -> list[IsotropyRow]:
    """Per-channel mean and within-channel std of the diagonal variance estimates."""
    if timestep not in samples.element_var_eps_hat:
        raise StepIndexError(timestep, len(samples.timesteps))
    rows: list[IsotropyRow] = []
    for name, table in (("eps_hat", samples.element_var_eps_hat), ("delta", samples.element_var_delta)):
        diag = table[timestep]
        ddof = 1 if diag.shape[1] > 1 else 0
        for channel in range(diag.shape[0]):
            rows.append(IsotropyRow(
                timestep=timestep,
                block=name,
                channel=channel,
                mean=float(diag[channel].mean()),
                std=float(diag[channel].std(ddof=ddof)),
            ))
    return rows
