"""
DriftLab - Report Models.

Result containers for diagnostics, metrics and calibration stability.
Each report exposes to_dict() for the JSON summary and csv_rows() for the
flat CSV consumed by external plotting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np


class CorrelationBlock(str, Enum):
    """Which pair of variables an off-diagonal correlation compares."""
    QUANT_OUTPUT = "quant_output"  # eps_hat_i vs eps_hat_j
    ERROR = "error"                # delta_i vs delta_j
    CROSS = "cross"                # eps_hat_i vs delta_j, i != j


class StressCriterion(str, Enum):
    MAX_ABS_DEVIATION = "max_abs_deviation"
    MAX_SIGNED_DEVIATION = "max_signed_deviation"
    MIN_SIGNED_DEVIATION = "min_signed_deviation"


def summarize(values: np.ndarray) -> dict[str, float]:
    """mean, median and 95th percentile."""
    values = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "p95": float(np.percentile(values, 95)),
    }


# -----------------------------------------------------------------------------
# Diagnostics
# -----------------------------------------------------------------------------

@dataclass(eq=False)
class CorrelationReport:
    """Off-diagonal |r| at one timestep: actual pairs and the shuffled baseline."""

    timestep: int
    block: CorrelationBlock
    pairs: np.ndarray          # (n_pairs, 2) coordinate indices
    actual: np.ndarray         # |r| per pair
    shuffled: np.ndarray       # |r| per pair after permuting one variable
    n_samples: int
    seed: int
    ks_statistic: float = 0.0
    ks_pvalue: float = 1.0

    @property
    def n_pairs(self) -> int:
        return len(self.actual)

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestep": self.timestep,
            "block": self.block.value,
            "n_pairs": self.n_pairs,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "actual": summarize(self.actual),
            "shuffled": summarize(self.shuffled),
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
        }

    def csv_rows(self) -> list[list[Any]]:
        return [
            [self.timestep, self.block.value, int(i), int(j), float(a), float(s)]
            for (i, j), a, s in zip(self.pairs, self.actual, self.shuffled)
        ]


@dataclass
class MarginalFit:
    """Moment summary and normal-fit distance of one variable."""

    mean: float
    std: float
    skewness: Optional[float]
    excess_kurtosis: Optional[float]
    cdf_distance: Optional[float]
    critical_value: Optional[float]
    degenerate: bool = False

    @property
    def rejects_normal(self) -> bool:
        if self.degenerate or self.cdf_distance is None or self.critical_value is None:
            return False
        return self.cdf_distance > self.critical_value

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": self.mean,
            "std": self.std,
            "skewness": self.skewness,
            "excess_kurtosis": self.excess_kurtosis,
            "cdf_distance": self.cdf_distance,
            "critical_value": self.critical_value,
            "degenerate": self.degenerate,
            "rejects_normal": self.rejects_normal,
        }


@dataclass
class GaussianityReport:
    """Marginal fits of eps_hat and delta at one coordinate plus their fitted 2D Gaussian."""

    timestep: int
    coordinate: int
    n_samples: int
    eps_hat: MarginalFit
    delta: MarginalFit
    joint_mean: np.ndarray
    joint_cov: np.ndarray
    joint_corr: Optional[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestep": self.timestep,
            "coordinate": self.coordinate,
            "n_samples": self.n_samples,
            "eps_hat": self.eps_hat.to_dict(),
            "delta": self.delta.to_dict(),
            "joint": {
                "mean": self.joint_mean.tolist(),
                "cov": self.joint_cov.tolist(),
                "corr": self.joint_corr,
            },
        }

    def csv_rows(self) -> list[list[Any]]:
        rows = []
        for name, fit in (("eps_hat", self.eps_hat), ("delta", self.delta)):
            rows.append([
                self.timestep, self.coordinate, name, fit.mean, fit.std, fit.skewness,
                fit.excess_kurtosis, fit.cdf_distance, fit.critical_value, int(fit.degenerate),
            ])
        return rows


@dataclass
class IsotropyRow:
    """Channel mean and within-channel std of per-element diagonal estimates."""

    timestep: int
    block: str  # "eps_hat" or "delta"
    channel: int
    mean: float
    std: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestep": self.timestep,
            "block": self.block,
            "channel": self.channel,
            "mean": self.mean,
            "std": self.std,
        }


# -----------------------------------------------------------------------------
# Metrics
# -----------------------------------------------------------------------------

@dataclass(eq=False)
class MarginalReport:
    """Per-channel moments with standard errors, optional targets and energy distance."""

    n: int
    mean: np.ndarray
    variance: np.ndarray
    mean_se: np.ndarray
    variance_se: np.ndarray
    target_mean: Optional[np.ndarray] = None
    target_variance: Optional[np.ndarray] = None
    energy_distance: Optional[float] = None
    p_value: Optional[float] = None

    @property
    def mean_delta(self) -> Optional[np.ndarray]:
        return None if self.target_mean is None else self.mean - self.target_mean

    @property
    def variance_delta(self) -> Optional[np.ndarray]:
        return None if self.target_variance is None else self.variance - self.target_variance

    def to_dict(self) -> dict[str, Any]:
        def as_list(arr: Optional[np.ndarray]) -> Optional[list[float]]:
            return None if arr is None else [float(v) for v in arr]

        return {
            "n": self.n,
            "mean": as_list(self.mean),
            "variance": as_list(self.variance),
            "mean_se": as_list(self.mean_se),
            "variance_se": as_list(self.variance_se),
            "target_mean": as_list(self.target_mean),
            "target_variance": as_list(self.target_variance),
            "mean_delta": as_list(self.mean_delta),
            "variance_delta": as_list(self.variance_delta),
            "energy_distance": self.energy_distance,
            "p_value": self.p_value,
        }

    def csv_rows(self) -> list[list[Any]]:
        rows = []
        for c in range(len(self.mean)):
            rows.append([
                c,
                self.mean[c],
                self.mean_se[c],
                self.variance[c],
                self.variance_se[c],
                None if self.target_mean is None else self.target_mean[c],
                None if self.target_variance is None else self.target_variance[c],
            ])
        return rows


# -----------------------------------------------------------------------------
# Calibration Stability
# -----------------------------------------------------------------------------

@dataclass(eq=False)
class EnvelopeBand:
    """Per-step min / median / max of the channel-mean factor for one subsample size."""

    size: int
    minimum: np.ndarray
    median: np.ndarray
    maximum: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.maximum - self.minimum

    def contains(self, reference: np.ndarray) -> np.ndarray:
        return (self.minimum <= reference) & (reference <= self.maximum)


@dataclass(eq=False)
class StressSubset:
    """A resampled run subset selected by its deviation from the reference factors."""

    criterion: StressCriterion
    size: int
    runs: np.ndarray
    factors: np.ndarray
    score: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "criterion": self.criterion.value,
            "size": self.size,
            "runs": [int(r) for r in self.runs],
            "score": self.score,
            "factors": [float(v) for v in self.factors],
        }


@dataclass(eq=False)
class EnvelopeReport:
    """Subsample envelopes of the channel-mean drift factor around the full-pool reference."""

    family: str
    reference: np.ndarray
    bands: list[EnvelopeBand]
    n_resamples: int
    seed: int
    total_runs: int
    stress: list[StressSubset] = field(default_factory=list)

    def band(self, size: int) -> EnvelopeBand:
        for band in self.bands:
            if band.size == size:
                return band
        raise KeyError(size)

    def to_dict(self) -> dict[str, Any]:
        return {
            "family": self.family,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "total_runs": self.total_runs,
            "reference": [float(v) for v in self.reference],
            "sizes": [b.size for b in self.bands],
            "median_width": {str(b.size): float(np.median(b.width)) for b in self.bands},
            "stress": [s.to_dict() for s in self.stress],
        }

    def csv_rows(self) -> list[list[Any]]:
        rows = []
        for band in self.bands:
            for step in range(len(self.reference)):
                rows.append([
                    band.size, step, band.minimum[step], band.median[step],
                    band.maximum[step], self.reference[step],
                ])
        return rows


# -----------------------------------------------------------------------------
# Retained Diagnostic Samples
# -----------------------------------------------------------------------------

@dataclass(eq=False)
class RetainedSamples:
    """
    Raw (eps_hat, delta) kept at a few timesteps for a capped coordinate subset,
    plus per-element variances over all coordinates.

    eps_hat[t] and delta[t] are (n_samples, P) arrays whose columns follow
    `coordinates` (flat indices into the C x L layout).
    """

    timesteps: tuple[int, ...]
    coordinates: np.ndarray
    layout: tuple[int, int]
    eps_hat: dict[int, np.ndarray]
    delta: dict[int, np.ndarray]
    element_var_eps_hat: dict[int, np.ndarray] = field(default_factory=dict)
    element_var_delta: dict[int, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    @property
    def n_samples(self) -> int:
        first = self.timesteps[0]
        return self.eps_hat[first].shape[0]

    def position(self, coordinate: int) -> Optional[int]:
        """Column of a flat coordinate in the retained arrays, if retained."""
        hits = np.flatnonzero(self.coordinates == coordinate)
        return int(hits[0]) if hits.size else None
