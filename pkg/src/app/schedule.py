"""
DriftLab - Noise Schedules.

Builds and queries discrete noise grids: the Karras/EDM sigma grid with a
terminal zero, and a variance-preserving grid uniform in log-SNR for the
DPM-Solver form. All arithmetic is binary64.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Optional, Sequence

import numpy as np

from src.core.domain.models import NoiseSchedule, ScheduleKind
from src.core.exceptions import InvalidScheduleError


def _require_finite(**values: float) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise InvalidScheduleError(f"Schedule parameter '{name}' must be finite", f"got {value}")


def build_karras_schedule(
    sigma_min: float,
    sigma_max: float,
    steps: int,
    rho: float = 7.0,
) -> NoiseSchedule:
    """
    Karras et al. grid with M = steps intervals.

    Levels 0..M-1 follow the rho-power interpolation from sigma_max to
    sigma_min; a terminal zero is appended as level M.
    """
    _require_finite(sigma_min=sigma_min, sigma_max=sigma_max, rho=rho)
    if not 0.0 < sigma_min < sigma_max:
        raise InvalidScheduleError("Need 0 < sigma_min < sigma_max", f"got {sigma_min}, {sigma_max}")
    if rho <= 0.0:
        raise InvalidScheduleError("rho must be positive", f"got {rho}")
    if steps < 1:
        raise InvalidScheduleError("steps must be >= 1", f"got {steps}")

    if steps == 1:
        sigmas = np.array([sigma_max], dtype=np.float64)
    else:
        ramp = np.arange(steps, dtype=np.float64) / (steps - 1)
        min_inv_rho = sigma_min ** (1.0 / rho)
        max_inv_rho = sigma_max ** (1.0 / rho)
        sigmas = (max_inv_rho + ramp * (min_inv_rho - max_inv_rho)) ** rho
        # pin endpoints against pow round-off
        sigmas[0] = sigma_max
        sigmas[-1] = sigma_min

    levels = tuple(float(s) for s in sigmas) + (0.0,)
    return NoiseSchedule(sigmas=levels, alphas=(1.0,) * len(levels), kind=ScheduleKind.KARRAS_VE)


def build_logsnr_schedule(lambda_min: float, lambda_max: float, steps: int) -> NoiseSchedule:
    """
    Variance-preserving grid uniform in lambda = log(alpha / sigma).

    alpha = sqrt(sigmoid(2 lambda)), sigma = sqrt(sigmoid(-2 lambda)); the grid runs
    from lambda_min (noisy) to lambda_max (clean) and has no zero level.
    """
    _require_finite(lambda_min=lambda_min, lambda_max=lambda_max)
    if lambda_min >= lambda_max:
        raise InvalidScheduleError("Need lambda_min < lambda_max", f"got {lambda_min}, {lambda_max}")
    if steps < 1:
        raise InvalidScheduleError("steps must be >= 1", f"got {steps}")

    lambdas = np.linspace(lambda_min, lambda_max, steps + 1)
    alphas = np.sqrt(1.0 / (1.0 + np.exp(-2.0 * lambdas)))
    sigmas = np.sqrt(1.0 / (1.0 + np.exp(2.0 * lambdas)))
    return NoiseSchedule(
        sigmas=tuple(float(s) for s in sigmas),
        alphas=tuple(float(a) for a in alphas),
        kind=ScheduleKind.LOG_SNR,
    )


def schedule_from_sigmas(
    sigmas: Sequence[float],
    alphas: Optional[Sequence[float]] = None,
    kind: ScheduleKind = ScheduleKind.KARRAS_VE,
) -> NoiseSchedule:
    """Explicit grid; alphas default to 1 at every level."""
    if alphas is None:
        alphas = [1.0] * len(sigmas)
    return NoiseSchedule(sigmas=tuple(sigmas), alphas=tuple(alphas), kind=kind)


def delta_sigma(schedule: NoiseSchedule, i: int) -> float:
    """sigma_{i+1} - sigma_i (negative on a decreasing grid)."""
    schedule.check_step(i)
    return schedule.sigmas[i + 1] - schedule.sigmas[i]


def sigma_bar(schedule: NoiseSchedule, i: int) -> float:
    """sigma_i / alpha_i, defined at every level including a terminal zero."""
    schedule.check_level(i)
    return schedule.sigmas[i] / schedule.alphas[i]


def delta_sigma_bar(schedule: NoiseSchedule, i: int) -> float:
    schedule.check_step(i)
    return sigma_bar(schedule, i + 1) - sigma_bar(schedule, i)


def logsnr_quantities(schedule: NoiseSchedule, i: int) -> tuple[float, float]:
    """(lambda_i, sigma_bar_i) at level i; undefined at sigma = 0."""
    schedule.check_level(i)
    sigma = schedule.sigmas[i]
    alpha = schedule.alphas[i]
    if sigma == 0.0:
        raise InvalidScheduleError("log-SNR is undefined at sigma = 0", f"level {i}")
    sb = sigma / alpha
    return -math.log(sb), sb


def schedule_fingerprint(schedule: NoiseSchedule) -> str:
    """SHA-256 of kind, sigmas and alphas at 17 significant digits."""
    payload = {
        "kind": schedule.kind.value,
        "sigmas": [format(s, ".17g") for s in schedule.sigmas],
        "alphas": [format(a, ".17g") for a in schedule.alphas],
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
