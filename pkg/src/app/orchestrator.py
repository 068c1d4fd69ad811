"""
DriftLab - Experiment Orchestrator.

Binds config, numerical services and the artifact repository behind every
CLI command. Each public method runs one command end to end and returns a
small summary dict for the command layer to print.
"""

import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np

from src.api.schemas import SCHEMA_VERSION, ExperimentConfig
from src.app.calibration import bias_profile, build_table_from_stats, calibrate, subsample_envelope
from src.app.diagnostics import (
    channel_isotropy_summary,
    default_timesteps,
    gaussianity_summary,
    offdiag_correlations,
    retain_diagnostic_samples,
)
from src.app.metrics import energy_distance, moment_report
from src.app.samplers import run_sampler
from src.app.schedule import schedule_fingerprint
from src.app.toymodel import sample_data, target_moments
from src.core.config import get_settings
from src.core.domain.models import DistributionKind, FactorGranularity, SampleBatch
from src.core.domain.reports import CorrelationBlock
from src.core.domain.statistics import CalibrationTable
from src.core.exceptions import ArtifactFormatError, ConfigurationError, MissingCalibrationError
from src.infra.persistence.repository import ArtifactRepository
from src.infra.utils.rng import stream

logger = logging.getLogger(__name__)


TABLE_FILE = "calibration.json"
MOMENTS_FILE = "calibration_moments.qdrm"
SAMPLES_FILE = "samples.qdlb"
SAMPLES_META_FILE = "samples.json"

GRID_CONVENTION = (
    "model evaluated in y = x/alpha at sigma_bar = sigma/alpha; "
    "first-order steps y += dsigma_bar * (1 + c) * eps_hat, x = alpha * y"
)
WARMUP_RULE = (
    "dpmpp2m: first step and the step into sigma = 0 are first order "
    "with the sigma_bar Euler factor"
)

MARGINAL_HEADER = ["channel", "mean", "mean_se", "variance", "variance_se", "target_mean", "target_variance"]
ENVELOPE_HEADER = ["size", "step", "min", "median", "max", "reference"]
CORRELATION_HEADER = ["timestep", "block", "coord_i", "coord_j", "abs_r", "abs_r_shuffled"]
GAUSSIANITY_HEADER = [
    "timestep", "coordinate", "variable", "mean", "std", "skewness",
    "excess_kurtosis", "cdf_distance", "critical_value", "degenerate",
]
ISOTROPY_HEADER = ["timestep", "block", "channel", "mean", "std"]


class ExperimentOrchestrator:
    """
    Runs the five experiment commands against one config.

    Usage:
        orchestrator = create_orchestrator(config, out_dir="data/runs/exp1")
        orchestrator.calibrate()
        orchestrator.sample(table_path="data/runs/exp1/calibration.json")
    """

    def __init__(
        self,
        config: ExperimentConfig,
        repository: ArtifactRepository,
        seed: Optional[int] = None,
        threads: int = 1,
    ):
        self._config = config
        self._repo = repository
        self._seed = config.seed if seed is None else seed
        self._threads = max(1, threads)
        self._schedule = config.build_schedule()
        self._dist = config.build_distribution()
        self._injector = config.build_injector()

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def repository(self) -> ArtifactRepository:
        return self._repo

    @property
    def meta(self) -> dict[str, Any]:
        """Stamp embedded in every artifact."""
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self._config.config_hash(),
            "seed": self._seed,
        }

    # -------------------------------------------------------------------------
    # Calibrate
    # -------------------------------------------------------------------------

    def calibrate(self) -> dict[str, Any]:
        """Offline calibration: table JSON plus the per-run moment sidecar."""
        table, run_moments = calibrate(
            self._dist,
            self._injector,
            self._schedule,
            self._config.calibration.runs,
            self._seed,
            threads=self._threads,
            granularity=self._config.sampler.granularity,
        )
        self._repo.save_table(TABLE_FILE, table, self.meta)
        self._repo.save_run_moments(MOMENTS_FILE, run_moments, self.meta)

        family = self._config.sampler.family
        return {
            "command": "calibrate",
            "runs": run_moments.runs,
            "family": family.value,
            "c": table.factors_for(family).channel_mean(),
            "bias_profile": bias_profile(table),
            "table": str(self._repo.path(TABLE_FILE)),
        }

    # -------------------------------------------------------------------------
    # Sample
    # -------------------------------------------------------------------------

    def sample(self, table_path: Optional[str | Path] = None) -> dict[str, Any]:
        """Online sampling with the configured family and mode."""
        run = self._config.build_run(self._seed)
        needs_table = run.mode.uses_drift or run.mode.uses_bias
        table: Optional[CalibrationTable] = None
        if table_path is not None:
            table = self._repo.load_table(table_path, self._schedule)
        elif needs_table:
            raise MissingCalibrationError(run.mode.value)

        factors = table.factors_for(run.family) if table is not None and run.mode.uses_drift else None
        bias_stats = table.stats if table is not None and run.mode.uses_bias else None
        batch = run_sampler(run, self._dist, self._injector, factors, bias_stats, threads=self._threads)
        self._repo.save_samples(SAMPLES_FILE, batch)

        analytic_variance = None
        if self._dist.kind == DistributionKind.ISOTROPIC_GAUSSIAN:
            analytic_variance = target_moments(self._dist)[1]
        self._repo.write_json(SAMPLES_META_FILE, {
            "meta": self.meta,
            "samples": SAMPLES_FILE,
            "layout": {"n": batch.n, "channels": batch.channels, "slots": batch.slots},
            "family": run.family.value,
            "mode": run.mode.value,
            "granularity": run.granularity.value,
            "init": run.init.value,
            "conditioning": run.conditioning,
            "grid_convention": GRID_CONVENTION,
            "warmup_rule": WARMUP_RULE,
            "schedule_fingerprint": schedule_fingerprint(self._schedule),
            "table": None if table is None else {"path": str(table_path), "fingerprint": table.fingerprint},
            "analytic_data_variance": analytic_variance,
        })
        return {
            "command": "sample",
            "n": batch.n,
            "family": run.family.value,
            "mode": run.mode.value,
            "variance": batch.values.var(axis=(0, 2), ddof=1),
            "samples": str(self._repo.path(SAMPLES_FILE)),
        }

    # -------------------------------------------------------------------------
    # Evaluate
    # -------------------------------------------------------------------------

    def evaluate(
        self,
        samples_a: str | Path,
        samples_b: Optional[str | Path] = None,
        analytic: bool = False,
    ) -> dict[str, Any]:
        """Moment report and energy distance of set A against set B or the analytic data law."""
        if (samples_b is None) == (not analytic):
            raise ConfigurationError("evaluate needs exactly one of --samples-b or --analytic")
        batch_a = self._repo.load_samples(samples_a)
        options = self._config.evaluation

        if analytic:
            if batch_a.layout != self._dist.layout:
                raise ConfigurationError(
                    "Samples do not match the configured distribution layout",
                    f"{batch_a.layout} != {self._dist.layout}",
                )
            target = target_moments(self._dist)
            batch_b = sample_data(self._dist, batch_a.n, stream(self._seed, "analytic-reference"))
        else:
            target = None
            batch_b = self._repo.load_samples(samples_b)

        report = moment_report(batch_a, target)
        if target is None:
            reference = moment_report(batch_b)
            report.target_mean, report.target_variance = reference.mean, reference.variance
        report.energy_distance, report.p_value = energy_distance(
            batch_a,
            batch_b,
            options.n_permutations,
            self._seed,
            stat_type=options.stat_type,
            max_samples=options.max_samples,
        )

        self._repo.write_csv("evaluation.csv", MARGINAL_HEADER, report.csv_rows(), self.meta)
        self._repo.write_json("evaluation.json", {
            "meta": self.meta,
            "samples_a": str(samples_a),
            "samples_b": None if samples_b is None else str(samples_b),
            "analytic": analytic,
            "report": report.to_dict(),
        })
        return {
            "command": "evaluate",
            "energy_distance": report.energy_distance,
            "p_value": report.p_value,
            "variance": report.variance,
        }

    # -------------------------------------------------------------------------
    # Stability
    # -------------------------------------------------------------------------

    def stability(self, calibration_dir: str | Path) -> dict[str, Any]:
        """Nested-subsample envelopes plus refitted stress-subset tables."""
        calibration_dir = Path(calibration_dir)
        table_path = calibration_dir / TABLE_FILE
        table = self._repo.load_table(table_path, self._schedule)
        run_moments = self._repo.load_run_moments(calibration_dir / MOMENTS_FILE)
        table_meta = self._repo.read_json(table_path).get("meta", {})
        if any(run_moments.meta.get(key) != table_meta.get(key) for key in ("config_hash", "seed")):
            raise ArtifactFormatError(
                str(calibration_dir / MOMENTS_FILE), "moment sidecar comes from a different calibration run"
            )
        if (run_moments.steps, run_moments.channels) != (table.steps, table.channels):
            raise ConfigurationError(
                "Moment sidecar does not match calibration table",
                f"{(run_moments.steps, run_moments.channels)} != {(table.steps, table.channels)}",
            )

        options = self._config.stability
        report = subsample_envelope(
            run_moments,
            self._schedule,
            options.sizes,
            options.n_resamples,
            self._seed,
            family=options.family,
            stress_size=options.stress_size,
        )
        self._repo.write_csv("envelope.csv", ENVELOPE_HEADER, report.csv_rows(), self.meta)

        granularity = FactorGranularity(table.provenance.get("granularity", FactorGranularity.CHANNEL.value))
        stress_tables = {}
        for subset in report.stress:
            provenance = dict(run_moments.provenance)
            provenance.update({
                "granularity": granularity.value,
                "stress_criterion": subset.criterion.value,
                "runs": [int(r) for r in subset.runs],
            })
            stressed = build_table_from_stats(
                self._schedule, run_moments.pooled(subset.runs), provenance, granularity
            )
            name = f"stress_{subset.criterion.value}.json"
            self._repo.save_table(name, stressed, self.meta)
            stress_tables[subset.criterion.value] = name

        self._repo.write_json("stability.json", {
            "meta": self.meta,
            "calibration": str(calibration_dir),
            "report": report.to_dict(),
            "stress_tables": stress_tables,
        })
        return {
            "command": "stability",
            "sizes": [b.size for b in report.bands],
            "median_width": [float(np.median(b.width)) for b in report.bands],
            "stress_tables": stress_tables,
        }

    # -------------------------------------------------------------------------
    # Validate Assumptions
    # -------------------------------------------------------------------------

    def validate_assumptions(self) -> dict[str, Any]:
        """Gaussianity, off-diagonal correlation and channel isotropy reports."""
        options = self._config.diagnostics
        timesteps = options.timesteps or default_timesteps(self._schedule.steps)
        samples = retain_diagnostic_samples(
            self._dist,
            self._injector,
            self._schedule,
            options.n_samples,
            self._seed,
            timesteps=timesteps,
            max_coordinates=options.max_coordinates,
        )
        coordinates = options.coordinates or [int(samples.coordinates[0])]

        gaussianity, correlation, isotropy = [], [], []
        for t in samples.timesteps:
            gaussianity.extend(gaussianity_summary(samples, t, c) for c in coordinates)
            correlation.extend(
                offdiag_correlations(samples, t, block, options.n_pairs, samples.n_samples, self._seed)
                for block in CorrelationBlock
            )
            isotropy.extend(channel_isotropy_summary(samples, t))

        self._repo.write_csv(
            "gaussianity.csv", GAUSSIANITY_HEADER,
            [row for report in gaussianity for row in report.csv_rows()], self.meta,
        )
        self._repo.write_csv(
            "correlation.csv", CORRELATION_HEADER,
            [row for report in correlation for row in report.csv_rows()], self.meta,
        )
        self._repo.write_csv(
            "isotropy.csv", ISOTROPY_HEADER,
            [[r.timestep, r.block, r.channel, r.mean, r.std] for r in isotropy], self.meta,
        )
        self._repo.write_json("assumptions.json", {
            "meta": self.meta,
            "timesteps": list(samples.timesteps),
            "n_samples": samples.n_samples,
            "gaussianity": [r.to_dict() for r in gaussianity],
            "correlation": [r.to_dict() for r in correlation],
            "isotropy": [r.to_dict() for r in isotropy],
        })

        flagged = sum(int(r.eps_hat.rejects_normal) + int(r.delta.rejects_normal) for r in gaussianity)
        return {
            "command": "validate-assumptions",
            "timesteps": list(samples.timesteps),
            "non_gaussian_marginals": flagged,
            "min_ks_pvalue": min(r.ks_pvalue for r in correlation),
        }


# -----------------------------------------------------------------------------
# Factory Function
# -----------------------------------------------------------------------------

def create_orchestrator(
    config: ExperimentConfig,
    out_dir: Optional[str | Path] = None,
    seed: Optional[int] = None,
    threads: int = 1,
) -> ExperimentOrchestrator:
    """Create an orchestrator writing to out_dir, the config's output_dir, or the settings default."""
    target = out_dir or config.output_dir or get_settings().DEFAULT_OUTPUT_DIR
    return ExperimentOrchestrator(
        config=config,
        repository=ArtifactRepository(target),
        seed=seed,
        threads=threads,
    )
