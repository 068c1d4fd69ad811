"""
DriftLab - Samplers.

Euler, flow-matching and DPM-Solver++(2M) samplers with the optional drift
correction (1 + c_i) and the bias-correction baseline.

Every model call evaluates the toy denoiser on y = x / alpha at noise level
sigma_bar = sigma / alpha. Euler and flow steps integrate in y and map back
with x = alpha * y; on a KarrasVE grid both maps are exact identities.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from src.app.toymodel import epsilon_array, quantize_array, sample_marginal
from src.core.config import RUN_BLOCK_SIZE
from src.core.domain.models import (
    DataDistribution,
    DriftFactors,
    FactorGranularity,
    InitMode,
    NoiseInjectorSpec,
    NoiseSchedule,
    SampleBatch,
    SamplerFamily,
    SamplerRun,
)
from src.core.domain.statistics import StepChannelStats
from src.core.exceptions import (
    ConfigurationError,
    DegenerateStepError,
    InconsistentRunError,
    InvalidScheduleError,
    MissingCalibrationError,
    NonFiniteValueError,
    ShapeMismatchError,
    StepIndexError,
)
from src.infra.utils.rng import stream


logger = logging.getLogger(__name__)


def _as_values(batch: SampleBatch | np.ndarray) -> np.ndarray:
    return batch.values if isinstance(batch, SampleBatch) else np.asarray(batch, dtype=np.float64)


def _channel_factor(c: float | np.ndarray, channels: int) -> np.ndarray:
    """Broadcastable (1, C, 1) factor from a scalar or per-channel vector."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        c = np.full(channels, float(c))
    if c.shape != (channels,):
        raise ShapeMismatchError("drift factor row", channels, c.shape)
    if not np.all(np.isfinite(c)):
        raise NonFiniteValueError("drift factor row")
    if np.any(c < 0.0):
        raise InconsistentRunError("Drift factors must be non-negative")
    return c.reshape(1, -1, 1)


# -----------------------------------------------------------------------------
# Step Rules
# -----------------------------------------------------------------------------

def _first_order_step(x: np.ndarray, direction: np.ndarray, delta: float, c: np.ndarray) -> np.ndarray:
    return x + delta * ((1.0 + c) * direction)


def euler_step(
    x_i: SampleBatch | np.ndarray,
    eps_hat: SampleBatch | np.ndarray,
    delta_sigma_i: float,
    c_i: float | np.ndarray = 0.0,
) -> np.ndarray:
    """x_{i+1} = x_i + delta_sigma_i * ((1 + c_i) * eps_hat), c_i broadcast per channel."""
    x = _as_values(x_i)
    eps = _as_values(eps_hat)
    if x.shape != eps.shape or x.ndim != 3:
        raise ShapeMismatchError("euler step inputs", x.shape, eps.shape)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(eps)) and math.isfinite(delta_sigma_i)):
        raise NonFiniteValueError("euler step inputs")
    return _first_order_step(x, eps, delta_sigma_i, _channel_factor(c_i, x.shape[1]))


def flow_matching_step(
    x_i: SampleBatch | np.ndarray,
    v_hat: SampleBatch | np.ndarray,
    delta_sigma_i: float,
    c_i: float | np.ndarray = 0.0,
) -> np.ndarray:
    """First-order flow update with the drift rescaling; same arithmetic as euler_step."""
    return euler_step(x_i, v_hat, delta_sigma_i, c_i)


def _step_log_snr(schedule: NoiseSchedule, k: int) -> float:
    """h for the step from level k to k + 1; infinite when landing on sigma = 0."""
    s_from = schedule.sigma_bar_array[k]
    s_to = schedule.sigma_bar_array[k + 1]
    if s_to == 0.0:
        return math.inf
    return math.log(s_from) - math.log(s_to)


def dpmpp2m_step(
    x_prev: SampleBatch | np.ndarray,
    denoised_prev: SampleBatch | np.ndarray,
    denoised_prev2: Optional[SampleBatch | np.ndarray],
    schedule: NoiseSchedule,
    i: int,
    c_i: float | np.ndarray = 0.0,
) -> np.ndarray:
    """
    DPM-Solver++(2M, midpoint) update into level i.

    x_i = (sigma_i / sigma_{i-1}) x_{i-1} - (1 + c_i) alpha_i (e^{-h_i} - 1) D_i

    with D_i = (1 + 1/(2 r_i)) x0_{i-1} - 1/(2 r_i) x0_{i-2}. The warmup step
    (i = 1, no history) and the step landing on sigma = 0 use D_i = x0_{i-1}.
    Any later step requires denoised_prev2.
    """
    if not 1 <= i <= schedule.steps:
        raise StepIndexError(i, schedule.steps + 1)
    x = _as_values(x_prev)
    d1 = _as_values(denoised_prev)
    if x.shape != d1.shape or x.ndim != 3:
        raise ShapeMismatchError("dpm step inputs", x.shape, d1.shape)
    c = _channel_factor(c_i, x.shape[1])

    sigmas = schedule.sigma_array
    h = _step_log_snr(schedule, i - 1)
    if h == 0.0:
        raise DegenerateStepError("Zero log-SNR increment", f"step into level {i}")

    if denoised_prev2 is None and i >= 2:
        raise ConfigurationError(
            "DPM++(2M) step needs the previous denoised estimate",
            f"no history for the step into level {i}",
        )
    if denoised_prev2 is None or math.isinf(h):
        denoised = d1
    else:
        if i < 2:
            raise StepIndexError(i, schedule.steps + 1)
        d2 = _as_values(denoised_prev2)
        if d2.shape != x.shape:
            raise ShapeMismatchError("dpm history", x.shape, d2.shape)
        h_last = _step_log_snr(schedule, i - 2)
        r = h_last / h
        denoised = (1.0 + 1.0 / (2.0 * r)) * d1 - (1.0 / (2.0 * r)) * d2

    ratio = sigmas[i] / sigmas[i - 1]
    coefficient = schedule.alpha_array[i] * np.expm1(-h)
    return ratio * x - (1.0 + c) * coefficient * denoised


# -----------------------------------------------------------------------------
# Drift Factors
# -----------------------------------------------------------------------------

def euler_drift_factor(sigma_i: float, delta_sigma_i: float, V_i: float | np.ndarray) -> np.ndarray:
    """c_i = |delta_sigma_i| / (2 sigma_i) * V_i."""
    if not sigma_i > 0.0:
        raise DegenerateStepError("Euler drift factor needs sigma_i > 0", f"got {sigma_i}")
    V = np.asarray(V_i, dtype=np.float64)
    if np.any(V < 0.0):
        raise InconsistentRunError("Conditional variance must be non-negative")
    return (abs(delta_sigma_i) / (2.0 * sigma_i)) * V


def dpm_quadrature_weights(schedule: NoiseSchedule, i: int) -> tuple[float, float]:
    """Effective epsilon weights (w_{i,i-1}, w_{i,i-2}) of the 2M midpoint update into level i."""
    if not 2 <= i <= schedule.steps:
        raise StepIndexError(i, schedule.steps + 1)
    h = _step_log_snr(schedule, i - 1)
    h_last = _step_log_snr(schedule, i - 2)
    if h == 0.0 or math.isinf(h):
        raise DegenerateStepError("2M weights need a finite nonzero log-SNR increment", f"level {i}")
    half_inv_r = h / (2.0 * h_last)
    e = math.expm1(-h)
    sb = schedule.sigma_bar_array
    return e * (1.0 + half_inv_r) * sb[i - 1], -e * half_inv_r * sb[i - 2]


def dpm_drift_factor(
    schedule: NoiseSchedule,
    i: int,
    V_prev: float | np.ndarray,
    V_prev2: float | np.ndarray,
) -> np.ndarray:
    """
    c_i for the 2M midpoint update into level i.

    Matches the injected variance sum_j w_{i,j}^2 V_j to the diffusion
    variance c_i * |sigma_bar_{i-1}^2 - sigma_bar_i^2|.
    """
    w1, w2 = dpm_quadrature_weights(schedule, i)
    sb = schedule.sigma_bar_array
    denominator = abs(sb[i - 1] ** 2 - sb[i] ** 2)
    if denominator == 0.0:
        raise DegenerateStepError("Zero denominator in DPM drift factor", f"level {i}")
    V1 = np.asarray(V_prev, dtype=np.float64)
    V2 = np.asarray(V_prev2, dtype=np.float64)
    if np.any(V1 < 0.0) or np.any(V2 < 0.0):
        raise InconsistentRunError("Conditional variance must be non-negative")
    return (w1 ** 2 * V1 + w2 ** 2 * V2) / denominator


def family_drift_factors(
    schedule: NoiseSchedule,
    family: SamplerFamily,
    V: np.ndarray,
) -> np.ndarray:
    """
    Factor rows for every step of a family from V rows shaped (M, C).

    Euler and flow use the sigma_bar-space Euler formula. DPM uses the 2M
    closed form for multistep updates and the Euler formula for the warmup
    step and the step into sigma = 0.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.shape[0] != schedule.steps:
        raise ShapeMismatchError("V rows", schedule.steps, V.shape[0])
    sb = schedule.sigma_bar_array
    rows = np.empty_like(V)
    for k in range(schedule.steps):
        target = k + 1
        multistep = family == SamplerFamily.DPMPP_2M and k >= 1 and sb[target] > 0.0
        if multistep:
            rows[k] = dpm_drift_factor(schedule, target, V[k], V[k - 1])
        else:
            rows[k] = euler_drift_factor(sb[k], sb[target] - sb[k], V[k])
    return rows


# -----------------------------------------------------------------------------
# Bias Correction
# -----------------------------------------------------------------------------

def bias_correct(
    eps_hat: SampleBatch | np.ndarray,
    step_stats: StepChannelStats,
    step: int,
) -> np.ndarray:
    """Shrinkage form (1 - a) eps_hat + a mu_eps_hat - mu_delta, per channel."""
    eps = _as_values(eps_hat)
    if not 0 <= step < step_stats.steps:
        raise MissingCalibrationError("bias_correct")
    if eps.shape[1] != step_stats.channels:
        raise ShapeMismatchError("bias correction channels", step_stats.channels, eps.shape[1])
    var = step_stats.var_eps_hat[step]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(var > 0.0, step_stats.cov[step] / var, 0.0)
    shape = (1, -1, 1)
    return (
        (1.0 - a).reshape(shape) * eps
        + (a * step_stats.mean_eps_hat[step]).reshape(shape)
        - step_stats.mean_delta[step].reshape(shape)
    )


# -----------------------------------------------------------------------------
# Sampler Loop
# -----------------------------------------------------------------------------

class _Trajectory:
    """Integrates one block of samples from level 0 to level M."""

    def __init__(
        self,
        run: SamplerRun,
        dist: DataDistribution,
        injector: Optional[NoiseInjectorSpec],
        factor_rows: np.ndarray,
        bias_stats: Optional[StepChannelStats],
    ):
        self._run = run
        self._dist = dist
        self._injector = injector
        self._factor_rows = factor_rows
        self._bias = bias_stats

    def _initial_state(self, n: int, rng: np.random.Generator) -> np.ndarray:
        schedule = self._run.schedule
        if self._run.init == InitMode.PRIOR:
            shape = (n, self._dist.channels, self._dist.slots_per_channel)
            return schedule.sigma_array[0] * rng.standard_normal(shape)
        y0 = sample_marginal(self._dist, n, float(schedule.sigma_bar_array[0]), rng)
        return schedule.alpha_array[0] * y0.values

    def _model_output(self, x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        schedule = self._run.schedule
        y = x / schedule.alpha_array[k]
        sb = float(schedule.sigma_bar_array[k])
        eps = epsilon_array(self._dist, y, sb)
        eps_hat, _ = quantize_array(self._dist, self._injector, eps, sb, k, rng)
        if self._run.mode.uses_bias:
            eps_hat = bias_correct(eps_hat, self._bias, k)
        return eps_hat

    def integrate(self, n: int, rng: np.random.Generator) -> np.ndarray:
        schedule = self._run.schedule
        alphas = schedule.alpha_array
        sb = schedule.sigma_bar_array
        x = self._initial_state(n, rng)
        history: list[np.ndarray] = []

        for k in range(schedule.steps):
            eps_hat = self._model_output(x, k, rng)
            c = self._factor_rows[k]
            if self._run.family == SamplerFamily.DPMPP_2M:
                denoised = x / alphas[k] - sb[k] * eps_hat
                previous = history[-1] if history else None
                x = dpmpp2m_step(x, denoised, previous, schedule, k + 1, c)
                history = [denoised]
            else:
                step = flow_matching_step if self._run.family == SamplerFamily.FLOW_MATCHING else euler_step
                y_next = step(x / alphas[k], eps_hat, sb[k + 1] - sb[k], c)
                x = alphas[k + 1] * y_next
            if not np.all(np.isfinite(x)):
                raise NonFiniteValueError(f"sampler state after step {k}")
        return x


def _resolve_factor_rows(
    run: SamplerRun,
    dist: DataDistribution,
    factors: Optional[DriftFactors],
) -> np.ndarray:
    steps = run.schedule.steps
    if not run.mode.uses_drift:
        return np.zeros((steps, dist.channels))
    if factors is None:
        raise MissingCalibrationError(run.mode.value)
    if factors.family != run.family:
        raise InconsistentRunError(
            "Drift factors belong to another sampler family",
            f"{factors.family.value} vs {run.family.value}",
        )
    if factors.values.shape != (steps, dist.channels):
        raise InconsistentRunError(
            "Drift factors do not match schedule and channels",
            f"expected {(steps, dist.channels)}, got {factors.values.shape}",
        )
    if run.granularity == FactorGranularity.SCALAR:
        return np.repeat(factors.channel_mean()[:, None], dist.channels, axis=1)
    return np.asarray(factors.values)


def run_sampler(
    run: SamplerRun,
    dist: DataDistribution,
    injector: Optional[NoiseInjectorSpec] = None,
    factors: Optional[DriftFactors] = None,
    bias_stats: Optional[StepChannelStats] = None,
    threads: int = 1,
) -> SampleBatch:
    """
    Draw run.batch_size final samples at sigma_M.

    The batch is split into fixed blocks, each driven by its own stream
    ("sample", block) under run.seed, so results do not depend on threads.
    """
    if run.family == SamplerFamily.DPMPP_2M and np.any(np.diff(run.schedule.sigma_bar_array) >= 0.0):
        raise InvalidScheduleError("DPM-Solver++ needs strictly decreasing sigma_bar")
    if injector is not None and injector.channels not in (None, dist.channels):
        raise ShapeMismatchError("injector channels", dist.channels, injector.channels)
    if injector is not None and injector.channels is not None and injector.rows < run.schedule.steps:
        raise InconsistentRunError(
            "Injector defines fewer rows than schedule steps",
            f"{injector.rows} < {run.schedule.steps}",
        )
    if run.mode.uses_bias:
        if bias_stats is None:
            raise MissingCalibrationError(run.mode.value)
        if (bias_stats.steps, bias_stats.channels) != (run.schedule.steps, dist.channels):
            raise InconsistentRunError("Bias statistics do not match schedule and channels")

    factor_rows = _resolve_factor_rows(run, dist, factors)
    trajectory = _Trajectory(run, dist, injector, factor_rows, bias_stats)

    block = RUN_BLOCK_SIZE
    sizes = [min(block, run.batch_size - start) for start in range(0, run.batch_size, block)]

    def _block(index: int) -> np.ndarray:
        return trajectory.integrate(sizes[index], stream(run.seed, "sample", index))

    logger.info(
        f"🎲 Sampling {run.batch_size} x {dist.layout} | family={run.family.value} "
        f"mode={run.mode.value} steps={run.schedule.steps} blocks={len(sizes)} threads={threads}"
    )
    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_block, range(len(sizes))))
    else:
        parts = [_block(i) for i in range(len(sizes))]
    return SampleBatch(np.concatenate(parts, axis=0))
