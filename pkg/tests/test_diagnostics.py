"""
Unit tests for assumption diagnostics: correlations, Gaussianity and isotropy.
"""

import math

import numpy as np
import pytest

from src.app.diagnostics import (
    channel_isotropy_summary,
    default_timesteps,
    gaussianity_summary,
    normality_critical_value,
    offdiag_correlations,
    retain_diagnostic_samples,
    shuffle_columns,
)
from src.core.domain.models import NoiseInjectorSpec
from src.core.domain.reports import CorrelationBlock, RetainedSamples
from src.core.exceptions import ConfigurationError, InsufficientSamplesError, StepIndexError
from src.infra.utils.rng import stream


# =============================================================================
# Timesteps & Retention
# =============================================================================

class TestRetention:
    """Trajectory retention at selected timesteps."""

    def test_default_timesteps(self):
        """90%, 50% and 10% of the noise range, high-noise first."""
        assert default_timesteps(30) == [3, 14, 26]
        assert default_timesteps(1) == [0]

    def test_retained_shapes(self, short_schedule, gaussian_toy):
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.3)
        samples = retain_diagnostic_samples(
            gaussian_toy, injector, short_schedule, 300, seed=1, timesteps=[0, 2], max_coordinates=10
        )
        assert samples.timesteps == (0, 2)
        assert samples.n_samples == 300
        assert samples.eps_hat[2].shape == (300, 10)
        assert samples.element_var_delta[0].shape == (4, 16)
        assert np.all(np.diff(samples.coordinates) > 0)

    def test_at_most_three_timesteps(self, short_schedule, gaussian_toy):
        with pytest.raises(ConfigurationError):
            retain_diagnostic_samples(gaussian_toy, None, short_schedule, 10, seed=1, timesteps=[0, 1, 2, 3])

    def test_timestep_out_of_range(self, short_schedule, gaussian_toy):
        with pytest.raises(StepIndexError):
            retain_diagnostic_samples(gaussian_toy, None, short_schedule, 10, seed=1, timesteps=[6])


# =============================================================================
# Off-Diagonal Correlations
# =============================================================================

class TestCorrelations:
    """Actual |r| against the shuffled baseline."""

    def test_independent_noise_matches_shuffled_baseline(self, short_schedule, gaussian_toy):
        """
        Independent errors: actual and shuffled |r| agree in at least 18 of 20 seeds.

        Agreement is KS p > 0.01. At the 5% level a correct sampler still sees three
        or more rejections in 20 seeds with probability about 0.075.
        """
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.3, rho=0.0)
        agree = 0
        for seed in range(20):
            samples = retain_diagnostic_samples(
                gaussian_toy, injector, short_schedule, 5000, seed=seed, timesteps=[0]
            )
            report = offdiag_correlations(samples, 0, CorrelationBlock.ERROR, 300, 5000, seed=seed)
            agree += report.ks_pvalue > 0.01
        assert agree >= 18

    def test_duplicated_coordinate_is_perfectly_correlated(self):
        """A copied column gives |r| = 1; its shuffled partner is near zero."""
        column = stream(3, "dup").standard_normal((2000, 1))
        values = np.hstack([column, column])
        samples = RetainedSamples(
            timesteps=(0,),
            coordinates=np.array([0, 1]),
            layout=(1, 2),
            eps_hat={0: values},
            delta={0: np.zeros_like(values)},
        )
        report = offdiag_correlations(samples, 0, CorrelationBlock.QUANT_OUTPUT, 1, 2000, seed=1)
        assert report.actual[0] == pytest.approx(1.0, abs=1e-12)
        assert report.shuffled[0] < 0.1

    def test_values_are_absolute_correlations(self, short_schedule, gaussian_toy):
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.3, rho=0.5)
        samples = retain_diagnostic_samples(gaussian_toy, injector, short_schedule, 200, seed=2, timesteps=[1])
        for block in CorrelationBlock:
            report = offdiag_correlations(samples, 1, block, 50, 200, seed=2)
            assert report.n_pairs == 50
            assert np.all((report.actual >= 0.0) & (report.actual <= 1.0))
            assert np.all((report.shuffled >= 0.0) & (report.shuffled <= 1.0))
            assert set(report.to_dict()["actual"]) == {"mean", "median", "p95"}

    def test_two_samples_are_always_collinear(self):
        """With n = 2 every pair of non-constant columns has |r| = 1."""
        values = stream(4, "two-points").standard_normal((2, 5))
        samples = RetainedSamples(
            timesteps=(0,),
            coordinates=np.arange(5),
            layout=(1, 5),
            eps_hat={0: values},
            delta={0: values[:, ::-1].copy()},
        )
        for block in CorrelationBlock:
            report = offdiag_correlations(samples, 0, block, 10, 2, seed=4)
            np.testing.assert_allclose(report.actual, 1.0, rtol=1e-12)

    def test_shuffle_keeps_each_column_multiset(self):
        columns = stream(5, "shuffle").standard_normal((500, 8))
        shuffled = shuffle_columns(columns, stream(5, "order"))
        np.testing.assert_array_equal(np.sort(shuffled, axis=0), np.sort(columns, axis=0))
        assert not np.array_equal(shuffled, columns)

    def test_cross_pairs_are_off_diagonal(self, short_schedule, gaussian_toy):
        samples = retain_diagnostic_samples(gaussian_toy, None, short_schedule, 50, seed=3, timesteps=[0])
        report = offdiag_correlations(samples, 0, CorrelationBlock.CROSS, 100, 50, seed=3)
        assert np.all(report.pairs[:, 0] != report.pairs[:, 1])

    def test_too_many_samples_requested(self, short_schedule, gaussian_toy):
        samples = retain_diagnostic_samples(gaussian_toy, None, short_schedule, 20, seed=4, timesteps=[0])
        with pytest.raises(InsufficientSamplesError):
            offdiag_correlations(samples, 0, CorrelationBlock.ERROR, 10, 21, seed=4)


# =============================================================================
# Gaussianity
# =============================================================================

class TestGaussianity:
    """Marginal and joint Gaussian fits."""

    def test_coarse_bit_grid_is_flagged(self, short_schedule, gaussian_toy):
        """b = 2 rounding gives errors far from any normal law."""
        samples = retain_diagnostic_samples(
            gaussian_toy, NoiseInjectorSpec.bit_grid(2, 1.0), short_schedule, 2000, seed=5, timesteps=[0]
        )
        report = gaussianity_summary(samples, 0, int(samples.coordinates[0]))
        assert report.delta.rejects_normal
        assert report.eps_hat.rejects_normal

    def test_joint_correlation_of_correlated_injector(self, short_schedule, gaussian_toy):
        """corr(eps_hat, delta) matches the injector's joint law."""
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.3, rho=0.6)
        samples = retain_diagnostic_samples(gaussian_toy, injector, short_schedule, 2000, seed=6, timesteps=[0])
        report = gaussianity_summary(samples, 0, int(samples.coordinates[0]))
        sigma = short_schedule.sigmas[0]
        s_eps = sigma / math.sqrt(1.0 + sigma ** 2)
        cov_delta_eps = 0.6 * 0.3 * s_eps
        var_hat = s_eps ** 2 + 0.09 + 2.0 * cov_delta_eps
        expected = (0.09 + cov_delta_eps) / math.sqrt(var_hat * 0.09)
        assert report.joint_corr == pytest.approx(expected, abs=0.05)
        assert report.joint_cov.shape == (2, 2)

    def test_standard_normal_moments(self):
        """n = 1e5 standard normal draws: |skewness| < 0.03 and |excess kurtosis| < 0.06."""
        rng = stream(12, "normal-moments")
        samples = RetainedSamples(
            timesteps=(0,),
            coordinates=np.array([0]),
            layout=(1, 1),
            eps_hat={0: rng.standard_normal((100_000, 1))},
            delta={0: rng.standard_normal((100_000, 1))},
        )
        report = gaussianity_summary(samples, 0, 0)
        for fit in (report.eps_hat, report.delta):
            assert abs(fit.skewness) < 0.03
            assert abs(fit.excess_kurtosis) < 0.06
            assert fit.cdf_distance < 0.01

    def test_zero_error_is_degenerate(self, short_schedule, gaussian_toy):
        samples = retain_diagnostic_samples(gaussian_toy, None, short_schedule, 150, seed=7, timesteps=[0])
        report = gaussianity_summary(samples, 0, int(samples.coordinates[0]))
        assert report.delta.degenerate
        assert not report.delta.rejects_normal
        assert report.joint_corr is None

    def test_needs_one_hundred_samples(self, short_schedule, gaussian_toy):
        samples = retain_diagnostic_samples(gaussian_toy, None, short_schedule, 99, seed=8, timesteps=[0])
        with pytest.raises(InsufficientSamplesError):
            gaussianity_summary(samples, 0, int(samples.coordinates[0]))

    def test_coordinate_must_be_retained(self, short_schedule, gaussian_toy):
        samples = retain_diagnostic_samples(
            gaussian_toy, None, short_schedule, 120, seed=9, timesteps=[0], max_coordinates=4
        )
        missing = next(c for c in range(gaussian_toy.dimension) if c not in samples.coordinates)
        with pytest.raises(ConfigurationError):
            gaussianity_summary(samples, 0, missing)

    def test_critical_value_shrinks_with_n(self):
        """The null quantile falls like 1 / sqrt(n) above the simulation cap."""
        assert normality_critical_value(200) > normality_critical_value(800)
        assert normality_critical_value(4000) == pytest.approx(normality_critical_value(1000) / 2.0, rel=1e-12)


# =============================================================================
# Isotropy
# =============================================================================

class TestIsotropy:
    """Channel-wise diagonal summaries."""

    def test_recovers_per_channel_error_variance(self, short_schedule, gaussian_toy):
        """s_delta = (0.1, 0.2, 0.3, 0.4) gives channel means (0.01, 0.04, 0.09, 0.16)."""
        n = 2000
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=[0.1, 0.2, 0.3, 0.4])
        samples = retain_diagnostic_samples(gaussian_toy, injector, short_schedule, n, seed=10, timesteps=[2])
        rows = [r for r in channel_isotropy_summary(samples, 2) if r.block == "delta"]
        assert [r.channel for r in rows] == [0, 1, 2, 3]
        for row, target in zip(rows, (0.01, 0.04, 0.09, 0.16)):
            se = target * math.sqrt(2.0 / (n - 1)) / math.sqrt(gaussian_toy.slots_per_channel)
            assert abs(row.mean - target) < 3.0 * se

    def test_homogeneous_injector_spread_shrinks(self, short_schedule, gaussian_toy):
        """Equal s_delta everywhere: the within-channel std of variance estimates falls toward 0."""
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.3)
        spreads = []
        for n in (250, 4000):
            samples = retain_diagnostic_samples(gaussian_toy, injector, short_schedule, n, seed=13, timesteps=[1])
            rows = [r for r in channel_isotropy_summary(samples, 1) if r.block == "delta"]
            spreads.append(max(r.std for r in rows))
        assert spreads[1] < spreads[0] / 2.0
        assert spreads[1] < 0.1 * 0.09

    def test_unknown_timestep(self, short_schedule, gaussian_toy):
        samples = retain_diagnostic_samples(gaussian_toy, None, short_schedule, 10, seed=11, timesteps=[0])
        with pytest.raises(StepIndexError):
            channel_isotropy_summary(samples, 3)


# =============================================================================
# Run tests
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
