"""
DriftLab - Analytic Toy Models.

Full-precision denoisers with closed-form scores and the simulated
quantized denoiser built on top of them.

    analytic_epsilon   eps = -sigma * grad log p(x; sigma)
    quantized_epsilon  (eps_hat, delta_eps) with eps_hat = eps + delta_eps

The array-level helpers (epsilon_array, quantize_array) are what the samplers
and calibration loops call; the SampleBatch wrappers validate their inputs.
"""

from __future__ import annotations

import logging
import math
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from src.core.config import CLEAN_MOMENT_PREPASS_SAMPLES
from src.core.domain.models import (
    DataDistribution,
    DistributionKind,
    InjectorKind,
    NoiseInjectorSpec,
    SampleBatch,
)
from src.core.exceptions import (
    InvalidDistributionError,
    NonFiniteValueError,
    ShapeMismatchError,
)
from src.infra.utils.rng import stream


logger = logging.getLogger(__name__)

LOG_TWO_PI = math.log(2.0 * math.pi)


def _check_sigma(sigma: float, allow_zero: bool = False) -> None:
    if not math.isfinite(sigma) or sigma < 0.0 or (sigma == 0.0 and not allow_zero):
        raise InvalidDistributionError("Noise level must be finite and positive", f"got sigma={sigma}")


def _check_layout(dist: DataDistribution, values: np.ndarray) -> None:
    if values.shape[1:] != dist.layout:
        raise ShapeMismatchError("sample layout", dist.layout, values.shape[1:])


# -----------------------------------------------------------------------------
# Scores
# -----------------------------------------------------------------------------

def _component_log_likelihood(dist: DataDistribution, values: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log w_k + log N(x; m_k, (s_k^2 + sigma^2) I), shape (N, K), and the variances."""
    variances = dist.std_array ** 2 + sigma ** 2
    diffs = values[:, None, :, :] - dist.mean_array[None]
    sq_norm = np.einsum("nkcl,nkcl->nk", diffs, diffs)
    d = dist.dimension
    log_norm = -0.5 * d * (LOG_TWO_PI + np.log(variances))
    return np.log(dist.weight_array)[None, :] + log_norm[None, :] - 0.5 * sq_norm / variances[None, :], variances


def epsilon_array(dist: DataDistribution, values: np.ndarray, sigma: float) -> np.ndarray:
    """Clean noise prediction for an (N, C, L) array at noise level sigma."""
    if dist.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
        variance = dist.scale_array ** 2 + sigma ** 2
        return sigma * values / variance[None, :, None]

    log_joint, variances = _component_log_likelihood(dist, values, sigma)
    resp = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
    diffs = values[:, None, :, :] - dist.mean_array[None]
    weighted = (resp / variances[None, :])[:, :, None, None] * diffs
    return sigma * weighted.sum(axis=1)


def analytic_epsilon(dist: DataDistribution, x: SampleBatch, sigma: float) -> SampleBatch:
    """Full-precision epsilon = -sigma * score at noise level sigma."""
    _check_sigma(sigma)
    _check_layout(dist, x.values)
    return SampleBatch(epsilon_array(dist, x.values, sigma))


def log_density(dist: DataDistribution, x: SampleBatch, sigma: float) -> np.ndarray:
    """Per-sample log p(x; sigma); sigma = 0 gives the data density."""
    _check_sigma(sigma, allow_zero=True)
    _check_layout(dist, x.values)
    values = x.values
    if dist.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
        variance = (dist.scale_array ** 2 + sigma ** 2)[None, :, None]
        per_element = -0.5 * (LOG_TWO_PI + np.log(variance) + values ** 2 / variance)
        return per_element.sum(axis=(1, 2))
    log_joint, _ = _component_log_likelihood(dist, values, sigma)
    return logsumexp(log_joint, axis=1)


# -----------------------------------------------------------------------------
# Sampling
# -----------------------------------------------------------------------------

def sample_data(dist: DataDistribution, n: int, rng: np.random.Generator) -> SampleBatch:
    """Exact draws from p(x; 0)."""
    shape = (n, dist.channels, dist.slots_per_channel)
    if dist.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
        return SampleBatch(dist.scale_array[None, :, None] * rng.standard_normal(shape))
    components = rng.choice(len(dist.weights), size=n, p=dist.weight_array)
    noise = rng.standard_normal(shape)
    values = dist.mean_array[components] + dist.std_array[components][:, None, None] * noise
    return SampleBatch(values)


def sample_marginal(dist: DataDistribution, n: int, sigma: float, rng: np.random.Generator) -> SampleBatch:
    """Exact draws from p(x; sigma) = data + sigma * z."""
    _check_sigma(sigma, allow_zero=True)
    data = sample_data(dist, n, rng)
    noise = rng.standard_normal(data.values.shape)
    return SampleBatch(data.values + sigma * noise)


def target_moments(dist: DataDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel analytic (mean, variance) of the data distribution."""
    if dist.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
        return np.zeros(dist.channels), dist.scale_array ** 2
    w = dist.weight_array[:, None]
    means = np.asarray(dist.means, dtype=np.float64)
    mean = (w * means).sum(axis=0)
    second = (w * (dist.std_array[:, None] ** 2 + means ** 2)).sum(axis=0)
    return mean, second - mean ** 2


@lru_cache(maxsize=512)
def clean_output_moments(dist: DataDistribution, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-channel (mean, std) of the clean epsilon under p(x; sigma).

    Exact for the isotropic Gaussian; a fixed-seed pre-pass otherwise.
    """
    _check_sigma(sigma)
    if dist.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
        variance = dist.scale_array ** 2 + sigma ** 2
        return np.zeros(dist.channels), np.sqrt(sigma ** 2 / variance)

    n = CLEAN_MOMENT_PREPASS_SAMPLES
    rng = stream(0, "clean-moment-prepass")
    x = sample_marginal(dist, n, sigma, rng)
    eps = epsilon_array(dist, x.values, sigma)
    logger.debug(f"Clean-output pre-pass at sigma={sigma:.6g} over {n} samples")
    return eps.mean(axis=(0, 2)), eps.std(axis=(0, 2), ddof=1)


# -----------------------------------------------------------------------------
# Quantization Injectors
# -----------------------------------------------------------------------------

def quantize_array(
    dist: DataDistribution,
    spec: Optional[NoiseInjectorSpec],
    eps: np.ndarray,
    sigma: float,
    step: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Quantized output for a precomputed clean epsilon.

    Returns (eps_hat, delta) with delta recomputed as eps_hat - eps so the
    pair is exactly consistent. A missing injector is the identity.
    """
    if spec is None:
        return eps, np.zeros_like(eps)

    if spec.kind == InjectorKind.BIT_GRID:
        grid = spec.grid_scale
        eps_hat = np.clip(np.round(eps * grid) / grid, -spec.clamp, spec.clamp)
        return eps_hat, eps_hat - eps

    if spec.channels != eps.shape[1]:
        raise ShapeMismatchError("injector channels", eps.shape[1], spec.channels)
    mean, std, rho = spec.row(step)
    mu_eps, s_eps = clean_output_moments(dist, sigma)

    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(s_eps > 0.0, rho * std / s_eps, 0.0)
    z = rng.standard_normal(eps.shape)
    shape = (1, -1, 1)
    noise = (
        mean.reshape(shape)
        + slope.reshape(shape) * (eps - mu_eps.reshape(shape))
        + (std * np.sqrt(1.0 - rho ** 2)).reshape(shape) * z
    )
    eps_hat = eps + noise
    return eps_hat, eps_hat - eps


def quantized_epsilon(
    dist: DataDistribution,
    spec: Optional[NoiseInjectorSpec],
    x: SampleBatch,
    sigma: float,
    step: int,
    rng_state: np.random.Generator,
) -> tuple[SampleBatch, SampleBatch]:
    """Simulated quantized denoiser output and its error against the clean output."""
    _check_sigma(sigma)
    _check_layout(dist, x.values)
    eps = epsilon_array(dist, x.values, sigma)
    eps_hat, delta = quantize_array(dist, spec, eps, sigma, step, rng_state)
    if not np.all(np.isfinite(eps_hat)):
        raise NonFiniteValueError("quantized output")
    return SampleBatch(eps_hat), SampleBatch(delta)
