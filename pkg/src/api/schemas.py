"""
DriftLab - Experiment Config Schemas.

Pydantic models for the single JSON experiment document. Each section builds
its domain object; the top-level validator checks that sections agree on
channel and step counts.
"""

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.app.schedule import build_karras_schedule, build_logsnr_schedule, schedule_from_sigmas
from src.core.domain.models import (
    DataDistribution,
    FactorGranularity,
    InitMode,
    NoiseInjectorSpec,
    NoiseSchedule,
    SamplerFamily,
    SamplerMode,
    SamplerRun,
    ScheduleKind,
)
from src.core.exceptions import ArtifactNotFoundError, ConfigurationError, ShapeMismatchError


SCHEMA_VERSION = 1

PerChannel = Union[float, list[float]]
PerStep = Union[float, list[float], list[list[float]]]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# =============================================================================
# Sections
# =============================================================================

class DistributionConfig(_Section):
    """Analytic data distribution."""
    kind: Literal["isotropic_gaussian", "gaussian_mixture"] = "isotropic_gaussian"
    channels: int = Field(default=4, ge=1)
    slots_per_channel: int = Field(default=16, ge=1)
    scale: PerChannel = 1.0
    weights: list[float] = Field(default_factory=list)
    means: list[PerChannel] = Field(default_factory=list)
    stds: list[float] = Field(default_factory=list)

    def build(self) -> DataDistribution:
        if self.kind == "isotropic_gaussian":
            return DataDistribution.isotropic_gaussian(self.channels, self.slots_per_channel, self.scale)
        return DataDistribution.gaussian_mixture(
            self.channels, self.slots_per_channel, self.weights, self.means, self.stds
        )


class ScheduleConfig(_Section):
    """Noise grid: explicit sigmas, a Karras grid, or a log-SNR grid."""
    kind: Literal["karras_ve", "log_snr"] = "karras_ve"
    sigmas: Optional[list[float]] = None
    alphas: Optional[list[float]] = None
    sigma_min: float = Field(default=0.02, gt=0)
    sigma_max: float = Field(default=10.0, gt=0)
    steps: int = Field(default=30, ge=1)
    rho: float = Field(default=7.0, gt=0)
    lambda_min: float = -5.0
    lambda_max: float = 5.0

    def build(self) -> NoiseSchedule:
        if self.sigmas is not None:
            return schedule_from_sigmas(self.sigmas, self.alphas, ScheduleKind(self.kind))
        if self.kind == "log_snr":
            return build_logsnr_schedule(self.lambda_min, self.lambda_max, self.steps)
        return build_karras_schedule(self.sigma_min, self.sigma_max, self.steps, self.rho)


class InjectorConfig(_Section):
    """
    Simulated quantization noise.

    JointGaussian mean/std/rho accept a scalar, one value per channel, or one
    per-channel row per sampler step.
    """
    kind: Literal["none", "joint_gaussian", "bit_grid"] = "none"
    mean: PerStep = 0.0
    std: PerStep = 0.0
    rho: PerStep = 0.0
    bits: Optional[int] = Field(default=None, ge=2, le=16)
    clamp: Optional[float] = Field(default=None, gt=0)

    def build(self, steps: int, channels: int) -> Optional[NoiseInjectorSpec]:
        if self.kind == "none":
            return None
        if self.kind == "bit_grid":
            return NoiseInjectorSpec.bit_grid(self.bits, self.clamp)

        def rows(value: PerStep, what: str) -> list[list[float]]:
            if isinstance(value, (int, float)):
                return [[float(value)] * channels for _ in range(steps)]
            if all(isinstance(v, (int, float)) for v in value):
                if len(value) != channels:
                    raise ShapeMismatchError(f"injector {what}", f"{channels} channel values", len(value))
                return [[float(v) for v in value] for _ in range(steps)]
            if len(value) != steps:
                raise ShapeMismatchError(f"injector {what} rows", steps, len(value))
            return [list(r) for r in value]

        return NoiseInjectorSpec.joint_gaussian(rows(self.mean, "mean"), rows(self.std, "std"), rows(self.rho, "rho"))


class SamplerConfig(_Section):
    """Online sampling run."""
    family: SamplerFamily = SamplerFamily.EULER
    mode: SamplerMode = SamplerMode.BASELINE
    batch_size: int = Field(default=1000, ge=1)
    granularity: FactorGranularity = FactorGranularity.CHANNEL
    init: InitMode = InitMode.MARGINAL
    conditioning: Optional[str] = None


class CalibrationConfig(_Section):
    runs: int = Field(default=5000, ge=1, description="Paired calibration runs K")


class EvaluationConfig(_Section):
    n_permutations: int = Field(default=200, ge=0)
    max_samples: int = Field(default=4000, ge=2)
    stat_type: Literal["u", "v"] = "u"


class StabilityConfig(_Section):
    sizes: list[int] = Field(default_factory=lambda: [50, 10, 5, 1])
    n_resamples: int = Field(default=200, ge=1)
    stress_size: int = Field(default=5, ge=1)
    family: SamplerFamily = SamplerFamily.EULER


class DiagnosticsConfig(_Section):
    n_samples: int = Field(default=5000, ge=2)
    timesteps: Optional[list[int]] = None
    max_coordinates: int = Field(default=256, ge=2)
    n_pairs: int = Field(default=10_000, ge=1)
    coordinates: Optional[list[int]] = None


# =============================================================================
# Experiment Document
# =============================================================================

class ExperimentConfig(_Section):
    """The complete experiment config document."""
    schema_version: int = SCHEMA_VERSION
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    output_dir: Optional[str] = None
    distribution: DistributionConfig = Field(default_factory=DistributionConfig)
    injector: InjectorConfig = Field(default_factory=InjectorConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    stability: StabilityConfig = Field(default_factory=StabilityConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        try:
            schedule = self.schedule.build()
            dist = self.distribution.build()
            self.injector.build(schedule.steps, dist.channels)
        except ConfigurationError as e:
            raise ValueError(str(e)) from e
        if max(self.stability.sizes, default=0) > self.calibration.runs:
            raise ValueError("stability sizes exceed calibration runs")
        if self.stability.stress_size > self.calibration.runs:
            raise ValueError("stress_size exceeds calibration runs")
        if self.diagnostics.timesteps is not None:
            if not 1 <= len(self.diagnostics.timesteps) <= 3:
                raise ValueError("diagnostics.timesteps must list 1 to 3 steps")
            if any(not 0 <= t < schedule.steps for t in self.diagnostics.timesteps):
                raise ValueError("diagnostics.timesteps outside the schedule")
        return self

    # -------------------------------------------------------------------------
    # Builders
    # -------------------------------------------------------------------------

    def build_schedule(self) -> NoiseSchedule:
        return self.schedule.build()

    def build_distribution(self) -> DataDistribution:
        return self.distribution.build()

    def build_injector(self) -> Optional[NoiseInjectorSpec]:
        return self.injector.build(self.build_schedule().steps, self.distribution.channels)

    def build_run(self, seed: Optional[int] = None) -> SamplerRun:
        return SamplerRun(
            schedule=self.build_schedule(),
            family=self.sampler.family,
            mode=self.sampler.mode,
            seed=self.seed if seed is None else seed,
            batch_size=self.sampler.batch_size,
            conditioning=self.sampler.conditioning,
            granularity=self.sampler.granularity,
            init=self.sampler.init,
        )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate an experiment config file."""
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFoundError(str(path))
    try:
        return ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment config: {path}", str(e)) from e
