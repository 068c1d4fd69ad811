"""
DriftLab - Domain Models.

Defines the core data structures used throughout the application.
Uses frozen dataclasses: schedules, distributions, injectors and factor
tables are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Any, Optional, Sequence

import numpy as np

from src.core.exceptions import (
    InconsistentRunError,
    InvalidDistributionError,
    InvalidInjectorError,
    InvalidScheduleError,
    NonFiniteValueError,
    ShapeMismatchError,
    StepIndexError,
)


# -----------------------------------------------------------------------------
# Enums
# -----------------------------------------------------------------------------

class ScheduleKind(str, Enum):
    """Parameterization of a discrete noise schedule."""
    KARRAS_VE = "karras_ve"
    LOG_SNR = "log_snr"


class SamplerFamily(str, Enum):
    """Sampler families that accept a drift correction."""
    EULER = "euler"
    FLOW_MATCHING = "flow"
    DPMPP_2M = "dpmpp2m"


class SamplerMode(str, Enum):
    """Which corrections a sampler run applies."""
    BASELINE = "baseline"
    QDRIFT = "qdrift"
    BIAS_CORRECT = "bias_correct"
    BIAS_CORRECT_QDRIFT = "bias_correct_qdrift"

    @property
    def uses_drift(self) -> bool:
        return self in (SamplerMode.QDRIFT, SamplerMode.BIAS_CORRECT_QDRIFT)

    @property
    def uses_bias(self) -> bool:
        return self in (SamplerMode.BIAS_CORRECT, SamplerMode.BIAS_CORRECT_QDRIFT)


class FactorGranularity(str, Enum):
    """Channel-wise factors, or one scalar per step (ablation)."""
    CHANNEL = "channel"
    SCALAR = "scalar"


class InitMode(str, Enum):
    """How the initial state x_0 is drawn."""
    MARGINAL = "marginal"  # exact draw from p(x; sigma_0)
    PRIOR = "prior"        # N(0, sigma_0^2 I)


class DistributionKind(str, Enum):
    ISOTROPIC_GAUSSIAN = "isotropic_gaussian"
    GAUSSIAN_MIXTURE = "gaussian_mixture"


class InjectorKind(str, Enum):
    JOINT_GAUSSIAN = "joint_gaussian"
    BIT_GRID = "bit_grid"


# -----------------------------------------------------------------------------
# Noise Schedule
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete noise levels sigma_0 > ... > sigma_M >= 0 with signal scales alpha_i."""

    sigmas: tuple[float, ...]
    alphas: tuple[float, ...]
    kind: ScheduleKind = ScheduleKind.KARRAS_VE

    def __post_init__(self) -> None:
        sigmas = tuple(float(s) for s in self.sigmas)
        alphas = tuple(float(a) for a in self.alphas)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "alphas", alphas)

        if len(sigmas) < 2:
            raise InvalidScheduleError("Schedule needs at least two levels", f"got {len(sigmas)}")
        if len(alphas) != len(sigmas):
            raise InvalidScheduleError(
                "sigmas and alphas must have equal length",
                f"{len(sigmas)} vs {len(alphas)}",
            )
        if not all(math.isfinite(v) for v in sigmas + alphas):
            raise InvalidScheduleError("Schedule contains non-finite values")
        if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
            raise InvalidScheduleError("sigmas must be strictly decreasing")
        if sigmas[-1] < 0.0 or any(s <= 0.0 for s in sigmas[:-1]):
            raise InvalidScheduleError("sigmas must be positive except a terminal zero")
        if any(a <= 0.0 for a in alphas):
            raise InvalidScheduleError("alphas must be strictly positive")
        if self.kind == ScheduleKind.KARRAS_VE and any(a != 1.0 for a in alphas):
            raise InvalidScheduleError("KarrasVE schedules require alpha = 1 at every level")

    @property
    def steps(self) -> int:
        """Number of intervals M."""
        return len(self.sigmas) - 1

    @cached_property
    def sigma_array(self) -> np.ndarray:
        arr = np.asarray(self.sigmas, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def alpha_array(self) -> np.ndarray:
        arr = np.asarray(self.alphas, dtype=np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def sigma_bar_array(self) -> np.ndarray:
        """Noise level of the normalized variable y = x / alpha."""
        arr = self.sigma_array / self.alpha_array
        arr.setflags(write=False)
        return arr

    def check_step(self, i: int) -> None:
        if not 0 <= i < self.steps:
            raise StepIndexError(i, self.steps)

    def check_level(self, i: int) -> None:
        if not 0 <= i <= self.steps:
            raise StepIndexError(i, self.steps + 1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "sigmas": list(self.sigmas),
            "alphas": list(self.alphas),
        }


# -----------------------------------------------------------------------------
# Sample Batch
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SampleBatch:
    """N samples, each C channels x L slots, stored as an (N, C, L) float64 array."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ShapeMismatchError("sample batch", "(N, C, L)", values.shape)
        if values.shape[0] < 1 or values.shape[1] < 1 or values.shape[2] < 1:
            raise ShapeMismatchError("sample batch", "N, C, L >= 1", values.shape)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError("sample batch")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def slots(self) -> int:
        return self.values.shape[2]

    @property
    def layout(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def flat(self) -> np.ndarray:
        """Samples as rows of length C * L."""
        return self.values.reshape(self.n, -1)


# -----------------------------------------------------------------------------
# Data Distributions
# -----------------------------------------------------------------------------

def _per_channel(value: float | Sequence[float], channels: int, what: str) -> tuple[float, ...]:
    """Broadcast a scalar or validate a per-channel list."""
    if isinstance(value, (int, float)):
        return (float(value),) * channels
    values = tuple(float(v) for v in value)
    if len(values) != channels:
        raise ShapeMismatchError(what, f"{channels} channel values", len(values))
    return values


@dataclass(frozen=True)
class DataDistribution:
    """
    Analytic data distribution over C x L coordinates.

    IsotropicGaussian: zero mean, per-channel scale s_c.
    GaussianMixture: weights w_k, per-channel means m_k (broadcast over slots),
    isotropic stds s_k.
    """

    kind: DistributionKind
    channels: int
    slots_per_channel: int
    scales: tuple[float, ...] = ()
    weights: tuple[float, ...] = ()
    means: tuple[tuple[float, ...], ...] = ()
    stds: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.channels < 1 or self.slots_per_channel < 1:
            raise InvalidDistributionError("channels and slots_per_channel must be >= 1")
        if self.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
            if len(self.scales) != self.channels:
                raise ShapeMismatchError("isotropic scales", self.channels, len(self.scales))
            if any(not math.isfinite(s) or s <= 0.0 for s in self.scales):
                raise InvalidDistributionError("scales must be finite and strictly positive")
        else:
            k = len(self.weights)
            if k < 1 or len(self.stds) != k or len(self.means) != k:
                raise InvalidDistributionError(
                    "mixture needs matching weights, means and stds",
                    f"{len(self.weights)} / {len(self.means)} / {len(self.stds)}",
                )
            if any(w <= 0.0 for w in self.weights):
                raise InvalidDistributionError("mixture weights must be positive")
            if abs(math.fsum(self.weights) - 1.0) > 1e-12:
                raise InvalidDistributionError("mixture weights must sum to 1")
            if any(not math.isfinite(s) or s <= 0.0 for s in self.stds):
                raise InvalidDistributionError("mixture stds must be finite and strictly positive")
            if any(len(m) != self.channels for m in self.means):
                raise ShapeMismatchError("mixture means", f"{self.channels} per component", [len(m) for m in self.means])

    @classmethod
    def isotropic_gaussian(
        cls, channels: int, slots_per_channel: int, scale: float | Sequence[float] = 1.0
    ) -> "DataDistribution":
        return cls(
            kind=DistributionKind.ISOTROPIC_GAUSSIAN,
            channels=channels,
            slots_per_channel=slots_per_channel,
            scales=_per_channel(scale, channels, "isotropic scales"),
        )

    @classmethod
    def gaussian_mixture(
        cls,
        channels: int,
        slots_per_channel: int,
        weights: Sequence[float],
        means: Sequence[float | Sequence[float]],
        stds: Sequence[float],
    ) -> "DataDistribution":
        return cls(
            kind=DistributionKind.GAUSSIAN_MIXTURE,
            channels=channels,
            slots_per_channel=slots_per_channel,
            weights=tuple(float(w) for w in weights),
            means=tuple(_per_channel(m, channels, "mixture mean") for m in means),
            stds=tuple(float(s) for s in stds),
        )

    @property
    def dimension(self) -> int:
        return self.channels * self.slots_per_channel

    @property
    def layout(self) -> tuple[int, int]:
        return self.channels, self.slots_per_channel

    @cached_property
    def scale_array(self) -> np.ndarray:
        return np.asarray(self.scales, dtype=np.float64)

    @cached_property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)

    @cached_property
    def mean_array(self) -> np.ndarray:
        """Component means as a (K, C, L) array."""
        means = np.asarray(self.means, dtype=np.float64)
        return np.repeat(means[:, :, None], self.slots_per_channel, axis=2)

    @cached_property
    def std_array(self) -> np.ndarray:
        return np.asarray(self.stds, dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "kind": self.kind.value,
            "channels": self.channels,
            "slots_per_channel": self.slots_per_channel,
        }
        if self.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
            data["scale"] = list(self.scales)
        else:
            data["weights"] = list(self.weights)
            data["means"] = [list(m) for m in self.means]
            data["stds"] = list(self.stds)
        return data


# -----------------------------------------------------------------------------
# Noise Injector
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseInjectorSpec:
    """
    Ground-truth parameters of the simulated quantization perturbation.

    JointGaussian rows are indexed by sampler step; each row holds per-channel
    mean, std and correlation with the clean output. BitGrid rounds the clean
    output onto a symmetric b-bit grid clamped to [-R, R].
    """

    kind: InjectorKind
    mean: tuple[tuple[float, ...], ...] = ()
    std: tuple[tuple[float, ...], ...] = ()
    rho: tuple[tuple[float, ...], ...] = ()
    bits: Optional[int] = None
    clamp: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind == InjectorKind.JOINT_GAUSSIAN:
            rows = len(self.mean)
            if rows < 1 or len(self.std) != rows or len(self.rho) != rows:
                raise InvalidInjectorError("JointGaussian needs equal numbers of mean/std/rho rows")
            widths = {len(r) for r in self.mean + self.std + self.rho}
            if len(widths) != 1:
                raise InvalidInjectorError("JointGaussian rows must share one channel count")
            values = [v for r in self.mean + self.std + self.rho for v in r]
            if not all(math.isfinite(v) for v in values):
                raise InvalidInjectorError("JointGaussian parameters must be finite")
            if any(s < 0.0 for r in self.std for s in r):
                raise InvalidInjectorError("JointGaussian std must be >= 0")
            if any(abs(p) >= 1.0 for r in self.rho for p in r):
                raise InvalidInjectorError("JointGaussian correlation must satisfy |rho| < 1")
        else:
            if self.bits is None or not 2 <= self.bits <= 16:
                raise InvalidInjectorError("BitGrid bit width must lie in [2, 16]", f"got {self.bits}")
            if self.clamp is None or not math.isfinite(self.clamp) or self.clamp <= 0.0:
                raise InvalidInjectorError("BitGrid clamp range must be positive", f"got {self.clamp}")

    @classmethod
    def joint_gaussian(
        cls,
        mean: np.ndarray | Sequence[Sequence[float]],
        std: np.ndarray | Sequence[Sequence[float]],
        rho: np.ndarray | Sequence[Sequence[float]],
    ) -> "NoiseInjectorSpec":
        """Build from (rows, C) arrays."""
        def rows(a: Any) -> tuple[tuple[float, ...], ...]:
            arr = np.atleast_2d(np.asarray(a, dtype=np.float64))
            return tuple(tuple(float(v) for v in r) for r in arr)

        return cls(kind=InjectorKind.JOINT_GAUSSIAN, mean=rows(mean), std=rows(std), rho=rows(rho))

    @classmethod
    def constant(
        cls,
        steps: int,
        channels: int,
        mean: float | Sequence[float] = 0.0,
        std: float | Sequence[float] = 0.0,
        rho: float | Sequence[float] = 0.0,
    ) -> "NoiseInjectorSpec":
        """Same per-channel parameters at every step."""
        def tile(v: float | Sequence[float], what: str) -> np.ndarray:
            return np.tile(np.asarray(_per_channel(v, channels, what)), (steps, 1))

        return cls.joint_gaussian(tile(mean, "injector mean"), tile(std, "injector std"), tile(rho, "injector rho"))

    @classmethod
    def bit_grid(cls, bits: int, clamp: float) -> "NoiseInjectorSpec":
        return cls(kind=InjectorKind.BIT_GRID, bits=int(bits), clamp=float(clamp))

    @property
    def rows(self) -> int:
        return len(self.mean)

    @property
    def channels(self) -> Optional[int]:
        return len(self.mean[0]) if self.kind == InjectorKind.JOINT_GAUSSIAN else None

    @cached_property
    def _arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.asarray(self.mean, dtype=np.float64),
            np.asarray(self.std, dtype=np.float64),
            np.asarray(self.rho, dtype=np.float64),
        )

    def row(self, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-channel (mean, std, rho) for a step."""
        if self.kind != InjectorKind.JOINT_GAUSSIAN:
            raise InvalidInjectorError("Only JointGaussian injectors have step rows")
        if not 0 <= step < self.rows:
            raise InvalidInjectorError(
                f"No injector row for step {step}",
                f"injector defines {self.rows} rows",
            )
        mean, std, rho = self._arrays
        return mean[step], std[step], rho[step]

    @property
    def grid_scale(self) -> float:
        """G = (2^(b-1) - 1) / R."""
        return (2 ** (self.bits - 1) - 1) / self.clamp

    def to_dict(self) -> dict[str, Any]:
        if self.kind == InjectorKind.BIT_GRID:
            return {"kind": self.kind.value, "bits": self.bits, "clamp": self.clamp}
        return {
            "kind": self.kind.value,
            "mean": [list(r) for r in self.mean],
            "std": [list(r) for r in self.std],
            "rho": [list(r) for r in self.rho],
        }


# -----------------------------------------------------------------------------
# Drift Factors & Sampler Runs
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DriftFactors:
    """Per-step, per-channel correction factors c_i for one sampler family."""

    values: np.ndarray
    family: SamplerFamily

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError("drift factors", "(steps, channels)", values.shape)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValueError("drift factors")
        if np.any(values < 0.0):
            raise InconsistentRunError("Drift factors must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, steps: int, channels: int, family: SamplerFamily) -> "DriftFactors":
        return cls(np.zeros((steps, channels)), family)

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.values[i]

    def channel_mean(self) -> np.ndarray:
        """Scalar c_i per step, averaged over channels."""
        return self.values.mean(axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family.value, "values": self.values.tolist()}


@dataclass(frozen=True)
class SamplerRun:
    """Online sampling configuration (one sampler family, one mode, one seed)."""

    schedule: NoiseSchedule
    family: SamplerFamily = SamplerFamily.EULER
    mode: SamplerMode = SamplerMode.BASELINE
    seed: int = 0
    batch_size: int = 1
    conditioning: Optional[str] = None  # opaque; analytic models are unconditional
    granularity: FactorGranularity = FactorGranularity.CHANNEL
    init: InitMode = InitMode.MARGINAL

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise InconsistentRunError("batch_size must be >= 1", f"got {self.batch_size}")
