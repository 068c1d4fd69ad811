"""
DriftLab - Calibration.

Offline phase: run full-precision trajectories, pair the simulated quantized
outputs with their errors, and fit per-step, per-channel moments. From the
moments come the conditional variance V, the bias slope a and the drift
factor tables of every sampler family.

A calibration run is one trajectory sample of C x L coordinates. Runs are
processed in fixed blocks, each with its own RNG stream, and their moments
are kept per run so nested subsamples can be pooled later.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional, Sequence

import numpy as np

from src.app.samplers import family_drift_factors
from src.app.schedule import schedule_fingerprint
from src.app.toymodel import epsilon_array, quantize_array, sample_marginal
from src.core.config import RUN_BLOCK_SIZE
from src.core.domain.models import (
    DataDistribution,
    DriftFactors,
    FactorGranularity,
    NoiseInjectorSpec,
    NoiseSchedule,
    SamplerFamily,
)
from src.core.domain.reports import EnvelopeBand, EnvelopeReport, StressCriterion, StressSubset
from src.core.domain.statistics import (
    CalibrationTable,
    RunMoments,
    StepChannelStats,
    batch_moments,
)
from src.core.exceptions import (
    ConfigurationError,
    InconsistentRunError,
    InsufficientSamplesError,
    ShapeMismatchError,
)
from src.infra.utils.rng import stream


logger = logging.getLogger(__name__)


# -----------------------------------------------------------------------------
# Estimators
# -----------------------------------------------------------------------------

def residual_variance(var_eps_hat: np.ndarray, var_delta: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """V = var_delta - cov^2 / var_eps_hat, clamped to [0, var_delta]."""
    var_eps_hat = np.asarray(var_eps_hat, dtype=np.float64)
    var_delta = np.asarray(var_delta, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        V = np.where(var_eps_hat > 0.0, var_delta - cov ** 2 / var_eps_hat, var_delta)
    return np.clip(V, 0.0, var_delta)


def conditional_variance(stats: StepChannelStats) -> np.ndarray:
    """V per (step, channel); zero-variance outputs fall back to var_delta."""
    return residual_variance(stats.var_eps_hat, stats.var_delta, stats.cov)


def regression_slope(stats: StepChannelStats) -> np.ndarray:
    """a = Cov(delta, eps_hat) / Var(eps_hat); zero where Var(eps_hat) = 0."""
    var = stats.var_eps_hat
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(var > 0.0, stats.cov / var, 0.0)


def drift_factor_table(
    stats: StepChannelStats,
    schedule: NoiseSchedule,
    family: SamplerFamily,
    granularity: FactorGranularity = FactorGranularity.CHANNEL,
) -> DriftFactors:
    """Drift factors of one family from the V rows of the stats."""
    if stats.steps != schedule.steps:
        raise ShapeMismatchError("calibration steps", schedule.steps, stats.steps)
    V = conditional_variance(stats)
    if granularity == FactorGranularity.SCALAR:
        V = np.repeat(V.mean(axis=1, keepdims=True), stats.channels, axis=1)
    return DriftFactors(family_drift_factors(schedule, family, V), family)


def build_table_from_stats(
    schedule: NoiseSchedule,
    stats: StepChannelStats,
    provenance: Optional[dict[str, Any]] = None,
    granularity: FactorGranularity = FactorGranularity.CHANNEL,
) -> CalibrationTable:
    """Derive V, a and every family's factors from raw moments."""
    factors = {
        family: drift_factor_table(stats, schedule, family, granularity)
        for family in SamplerFamily
    }
    return CalibrationTable(
        schedule=schedule,
        fingerprint=schedule_fingerprint(schedule),
        stats=stats,
        conditional_variance=conditional_variance(stats),
        regression_slope=regression_slope(stats),
        factors=factors,
        provenance=dict(provenance or {}),
    )


def bias_profile(table: CalibrationTable) -> np.ndarray:
    """Channel-averaged shrinkage coefficient a_t per step."""
    return table.regression_slope.mean(axis=1)


# -----------------------------------------------------------------------------
# Offline Calibration
# -----------------------------------------------------------------------------

def _calibrate_block(
    dist: DataDistribution,
    injector: Optional[NoiseInjectorSpec],
    schedule: NoiseSchedule,
    runs: int,
    rng: np.random.Generator,
) -> RunMoments:
    """Per-run moments for one block of runs, trajectory advanced with the clean epsilon."""
    alphas = schedule.alpha_array
    sb = schedule.sigma_bar_array
    steps = schedule.steps
    moments = [np.empty((runs, steps, dist.channels)) for _ in range(6)]

    x = alphas[0] * sample_marginal(dist, runs, float(sb[0]), rng).values
    for k in range(steps):
        y = x / alphas[k]
        eps = epsilon_array(dist, y, float(sb[k]))
        eps_hat, delta = quantize_array(dist, injector, eps, float(sb[k]), k, rng)
        for target, value in zip(moments, batch_moments(eps_hat, delta, axis=(2,))):
            target[:, k, :] = value
        x = alphas[k + 1] * (y + (sb[k + 1] - sb[k]) * eps)
    return RunMoments(*moments)


def calibrate(
    dist: DataDistribution,
    injector: Optional[NoiseInjectorSpec],
    schedule: NoiseSchedule,
    K: int,
    seed: int,
    threads: int = 1,
    granularity: FactorGranularity = FactorGranularity.CHANNEL,
) -> tuple[CalibrationTable, RunMoments]:
    """
    Offline calibration over K runs.

    Returns the fitted table and the per-run moments behind it. Block b of
    RUN_BLOCK_SIZE runs draws from stream ("calibrate", b) under seed.
    """
    if K < 1:
        raise ConfigurationError("Calibration needs K >= 1 runs", f"got {K}")
    if injector is not None and injector.channels not in (None, dist.channels):
        raise ShapeMismatchError("injector channels", dist.channels, injector.channels)
    if injector is not None and injector.channels is not None and injector.rows < schedule.steps:
        raise InconsistentRunError(
            "Injector defines fewer rows than schedule steps",
            f"{injector.rows} < {schedule.steps}",
        )

    block = RUN_BLOCK_SIZE
    sizes = [min(block, K - start) for start in range(0, K, block)]
    logger.info(
        f"📐 Calibrating {K} runs over {schedule.steps} steps "
        f"({len(sizes)} blocks, {threads} threads)"
    )

    def _block(index: int) -> RunMoments:
        return _calibrate_block(dist, injector, schedule, sizes[index], stream(seed, "calibrate", index))

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_block, range(len(sizes))))
    else:
        parts = [_block(i) for i in range(len(sizes))]

    provenance = {
        "K": K,
        "seed": seed,
        "injector": None if injector is None else injector.to_dict(),
        "distribution": dist.to_dict(),
        "granularity": granularity.value,
    }
    run_moments = RunMoments.concatenate(parts, provenance=provenance)
    table = build_table_from_stats(schedule, run_moments.pooled(), provenance, granularity)
    logger.info(f"✅ Calibration finished: mean V = {table.conditional_variance.mean():.6g}")
    return table, run_moments


# -----------------------------------------------------------------------------
# Subsample Envelopes
# -----------------------------------------------------------------------------

def _channel_mean_factors(
    run_moments: RunMoments,
    schedule: NoiseSchedule,
    family: SamplerFamily,
    runs: Optional[np.ndarray] = None,
) -> np.ndarray:
    stats = run_moments.pooled(None if runs is None else np.sort(runs))
    return drift_factor_table(stats, schedule, family).channel_mean()


def subsample_envelope(
    run_moments: RunMoments,
    schedule: NoiseSchedule,
    sizes: Sequence[int],
    n_resamples: int,
    seed: int,
    family: SamplerFamily = SamplerFamily.EULER,
    stress_size: Optional[int] = None,
) -> EnvelopeReport:
    """
    Min / median / max of the channel-mean factor over nested subsamples.

    Each resample draws one permutation of the runs; the subset of size K is
    its first K entries, so subsets are nested across sizes. Stress subsets
    are picked among the stress_size subsets by their deviation from the
    full-pool reference.
    """
    total = run_moments.runs
    sizes = sorted({int(s) for s in sizes}, reverse=True)
    if n_resamples < 1:
        raise ConfigurationError("n_resamples must be >= 1", f"got {n_resamples}")
    if not sizes or sizes[-1] < 1:
        raise ConfigurationError("Subsample sizes must be >= 1", f"got {sizes}")
    if sizes[0] > total:
        raise InsufficientSamplesError("subsample envelope", sizes[0], total)
    if stress_size is not None and not 1 <= stress_size <= total:
        raise InsufficientSamplesError("stress subsets", stress_size, total)

    reference = _channel_mean_factors(run_moments, schedule, family)
    draws = {k: np.empty((n_resamples, schedule.steps)) for k in sizes}
    stress_draws = np.empty((n_resamples, schedule.steps))
    subsets: list[np.ndarray] = []

    for r in range(n_resamples):
        order = stream(seed, "envelope", r).permutation(total)
        for k in sizes:
            draws[k][r] = _channel_mean_factors(run_moments, schedule, family, order[:k])
        if stress_size is not None:
            subset = order[:stress_size]
            subsets.append(subset)
            stress_draws[r] = (
                draws[stress_size][r] if stress_size in draws
                else _channel_mean_factors(run_moments, schedule, family, subset)
            )

    bands = [
        EnvelopeBand(
            size=k,
            minimum=draws[k].min(axis=0),
            median=np.median(draws[k], axis=0),
            maximum=draws[k].max(axis=0),
        )
        for k in sizes
    ]

    stress: list[StressSubset] = []
    if stress_size is not None:
        deviation = stress_draws - reference[None, :]
        scores = {
            StressCriterion.MAX_ABS_DEVIATION: np.abs(deviation).sum(axis=1),
            StressCriterion.MAX_SIGNED_DEVIATION: deviation.sum(axis=1),
            StressCriterion.MIN_SIGNED_DEVIATION: deviation.sum(axis=1),
        }
        for criterion, score in scores.items():
            pick = int(np.argmin(score)) if criterion == StressCriterion.MIN_SIGNED_DEVIATION else int(np.argmax(score))
            stress.append(StressSubset(
                criterion=criterion,
                size=stress_size,
                runs=np.sort(subsets[pick]),
                factors=stress_draws[pick],
                score=float(score[pick]),
            ))

    logger.info(f"📊 Envelope over sizes {sizes} with {n_resamples} resamples")
    return EnvelopeReport(
        family=family.value,
        reference=reference,
        bands=bands,
        n_resamples=n_resamples,
        seed=seed,
        total_runs=total,
        stress=stress,
    )
