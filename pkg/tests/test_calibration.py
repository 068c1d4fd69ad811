"""
Unit tests for offline calibration, streaming moments and subsample envelopes.
"""

import numpy as np
import pytest

from src.app.calibration import (
    bias_profile,
    build_table_from_stats,
    calibrate,
    conditional_variance,
    regression_slope,
    residual_variance,
    subsample_envelope,
)
from src.app.toymodel import epsilon_array, quantize_array, sample_marginal
from src.core.domain.models import (
    DataDistribution,
    FactorGranularity,
    NoiseInjectorSpec,
    SamplerFamily,
)
from src.core.domain.reports import StressCriterion
from src.core.domain.statistics import MOMENT_FIELDS, MomentAccumulator, StepChannelStats
from src.core.exceptions import (
    ConfigurationError,
    InconsistentRunError,
    InsufficientSamplesError,
    ShapeMismatchError,
)
from src.infra.utils.rng import stream
from tests.oracles import induced_conditional_variance


# =============================================================================
# Fixtures
# =============================================================================

@pytest.fixture(scope="module")
def correlated_calibration(short_schedule, gaussian_toy):
    """K = 3200 runs with rho = 0.6, s_delta = 0.3: 51200 element-samples per channel and step."""
    injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, mean=0.0, std=0.3, rho=0.6)
    return calibrate(gaussian_toy, injector, short_schedule, K=3200, seed=21)


@pytest.fixture(scope="module")
def envelope_runs(karras_schedule, gaussian_toy):
    """Per-run moments for 500 runs under an independent injector."""
    injector = NoiseInjectorSpec.constant(karras_schedule.steps, 4, mean=0.0, std=0.3, rho=0.0)
    _, run_moments = calibrate(gaussian_toy, injector, karras_schedule, K=500, seed=3)
    return run_moments


# =============================================================================
# Streaming Moments
# =============================================================================

class TestMomentMerging:
    """Parallel merge of raw moments."""

    def test_merge_matches_single_pass_over_random_partitions(self):
        """Any shard split merges to the single-pass result."""
        rng = stream(77, "merge")
        n, steps, channels, slots = 240, 3, 2, 5
        eps_hat = 0.5 + rng.standard_normal((steps, n, channels, slots))
        delta = 0.3 * eps_hat + 0.1 * rng.standard_normal((steps, n, channels, slots))

        full = MomentAccumulator(steps, channels)
        for k in range(steps):
            full.update(k, eps_hat[k], delta[k])
        expected = full.freeze()

        for trial in range(100):
            cuts = np.sort(rng.choice(np.arange(1, n), size=rng.integers(1, 8), replace=False))
            bounds = [0, *cuts.tolist(), n]
            merged = MomentAccumulator(steps, channels)
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                shard = MomentAccumulator(steps, channels)
                for k in range(steps):
                    shard.update(k, eps_hat[k, lo:hi], delta[k, lo:hi])
                merged.merge(shard)
            got = merged.freeze()
            np.testing.assert_array_equal(got.count, expected.count)
            for name in MOMENT_FIELDS[1:]:
                np.testing.assert_allclose(
                    getattr(got, name), getattr(expected, name), rtol=1e-10, atol=1e-12,
                    err_msg=f"{name} (trial {trial})",
                )

    def test_stats_merge_of_disjoint_halves(self):
        rng = stream(8, "halves")
        eps_hat = rng.standard_normal((50, 1, 4))
        delta = rng.standard_normal((50, 1, 4))
        a, b, both = (MomentAccumulator(1, 1) for _ in range(3))
        a.update(0, eps_hat[:20], delta[:20])
        b.update(0, eps_hat[20:], delta[20:])
        both.update(0, eps_hat, delta)
        merged = a.freeze().merge(b.freeze())
        np.testing.assert_allclose(merged.cov, both.freeze().cov, rtol=1e-12)

    def test_merge_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            StepChannelStats.empty(2, 3).merge(StepChannelStats.empty(3, 3))

    def test_empty_stats_have_zero_variance(self):
        """Fewer than two samples give zero variances, and V falls back to zero."""
        stats = StepChannelStats.empty(2, 2)
        assert np.all(stats.var_delta == 0.0)
        assert np.all(conditional_variance(stats) == 0.0)


# =============================================================================
# Estimators
# =============================================================================

class TestEstimators:
    """Conditional variance and regression slope."""

    def test_residual_variance_is_clamped(self):
        """Negative residuals clamp to zero; results never exceed var_delta."""
        V = residual_variance(np.array([1.0, 1.0]), np.array([0.5, 0.5]), np.array([0.9, 0.0]))
        np.testing.assert_array_equal(V, [0.0, 0.5])

    def test_zero_output_variance_falls_back_to_var_delta(self):
        V = residual_variance(np.array([0.0]), np.array([0.2]), np.array([0.0]))
        assert V[0] == 0.2

    def test_rho_point_six_matches_induced_variance(self, correlated_calibration, short_schedule):
        """V at the first step is within 3% of the closed-form conditional variance."""
        table, _ = correlated_calibration
        expected = induced_conditional_variance(1.0, short_schedule.sigmas[0], 0.3, 0.6)
        np.testing.assert_allclose(table.conditional_variance[0], expected, rtol=0.03)

    def test_regression_slope_matches_ground_truth(self, correlated_calibration, short_schedule):
        """a = Cov(delta, eps_hat) / Var(eps_hat) within 3%."""
        table, _ = correlated_calibration
        sigma = short_schedule.sigmas[0]
        s_eps = sigma / np.sqrt(1.0 + sigma ** 2)
        cov_delta_eps = 0.6 * 0.3 * s_eps
        var_hat = s_eps ** 2 + 0.09 + 2.0 * cov_delta_eps
        expected = (0.09 + cov_delta_eps) / var_hat
        np.testing.assert_allclose(table.regression_slope[0], expected, rtol=0.03)
        np.testing.assert_allclose(regression_slope(table.stats), table.regression_slope)

    def test_bias_profile_is_channel_mean(self, correlated_calibration, short_schedule):
        table, _ = correlated_calibration
        profile = bias_profile(table)
        assert profile.shape == (short_schedule.steps,)
        np.testing.assert_allclose(profile, table.regression_slope.mean(axis=1))

    def test_monte_carlo_error_shrinks_at_root_n(self):
        """RMS error of V falls by sqrt(10) per decade of samples, within [2.5, 4.0]."""
        dist = DataDistribution.isotropic_gaussian(1, 1, 1.0)
        spec = NoiseInjectorSpec.constant(1, 1, mean=0.0, std=0.3, rho=0.6)
        truth = induced_conditional_variance(1.0, 1.0, 0.3, 0.6)

        def rmse(n: int) -> float:
            errors = []
            for r in range(200):
                rng = stream(r, "convergence", n)
                x = sample_marginal(dist, n, 1.0, rng).values
                eps_hat, delta = quantize_array(dist, spec, epsilon_array(dist, x, 1.0), 1.0, 0, rng)
                acc = MomentAccumulator(1, 1)
                acc.update(0, eps_hat, delta)
                errors.append(conditional_variance(acc.freeze())[0, 0] - truth)
            return float(np.sqrt(np.mean(np.square(errors))))

        ratio = rmse(1_000) / rmse(10_000)
        assert 2.5 <= ratio <= 4.0


# =============================================================================
# Offline Calibration
# =============================================================================

class TestCalibrate:
    """End-to-end calibration runs."""

    def test_no_injector_gives_zero_variance(self, short_schedule, gaussian_toy):
        """Without quantization noise V and every factor table are zero."""
        table, run_moments = calibrate(gaussian_toy, None, short_schedule, K=8, seed=1)
        assert np.all(table.conditional_variance == 0.0)
        for family in SamplerFamily:
            assert np.all(table.factors_for(family).values == 0.0)
        assert run_moments.runs == 8

    def test_thread_count_does_not_change_result(self, short_schedule, gaussian_toy, monkeypatch):
        """Blocks carry their own streams, so threads give identical tables."""
        monkeypatch.setattr("src.app.calibration.RUN_BLOCK_SIZE", 16)
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.2, rho=0.3)
        serial, _ = calibrate(gaussian_toy, injector, short_schedule, K=50, seed=4, threads=1)
        threaded, _ = calibrate(gaussian_toy, injector, short_schedule, K=50, seed=4, threads=3)
        for name in MOMENT_FIELDS:
            np.testing.assert_array_equal(getattr(serial.stats, name), getattr(threaded.stats, name))

    def test_same_seed_is_reproducible(self, short_schedule, gaussian_toy):
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 4, std=0.2)
        a, _ = calibrate(gaussian_toy, injector, short_schedule, K=10, seed=5)
        b, _ = calibrate(gaussian_toy, injector, short_schedule, K=10, seed=5)
        c, _ = calibrate(gaussian_toy, injector, short_schedule, K=10, seed=6)
        np.testing.assert_array_equal(a.conditional_variance, b.conditional_variance)
        assert not np.array_equal(a.conditional_variance, c.conditional_variance)

    def test_pooled_runs_match_table_stats(self, correlated_calibration):
        table, run_moments = correlated_calibration
        np.testing.assert_array_equal(run_moments.pooled().comoment, table.stats.comoment)
        assert np.all(table.stats.count == 3200 * 16)

    def test_scalar_granularity_shares_one_value(self, correlated_calibration, short_schedule):
        """Scalar tables repeat the channel-averaged factor across channels."""
        table, _ = correlated_calibration
        scalar = build_table_from_stats(short_schedule, table.stats, granularity=FactorGranularity.SCALAR)
        values = scalar.factors_for(SamplerFamily.EULER).values
        np.testing.assert_array_equal(values, np.repeat(values[:, :1], 4, axis=1))

    def test_requires_at_least_one_run(self, short_schedule, gaussian_toy):
        with pytest.raises(ConfigurationError):
            calibrate(gaussian_toy, None, short_schedule, K=0, seed=1)

    def test_injector_rows_must_cover_schedule(self, short_schedule, gaussian_toy):
        injector = NoiseInjectorSpec.constant(3, 4, std=0.1)
        with pytest.raises(InconsistentRunError):
            calibrate(gaussian_toy, injector, short_schedule, K=2, seed=1)

    def test_injector_channel_mismatch(self, short_schedule, gaussian_toy):
        injector = NoiseInjectorSpec.constant(short_schedule.steps, 2, std=0.1)
        with pytest.raises(ShapeMismatchError):
            calibrate(gaussian_toy, injector, short_schedule, K=2, seed=1)


# =============================================================================
# Subsample Envelopes
# =============================================================================

class TestSubsampleEnvelope:
    """Nested-subsample stability of the drift factors."""

    def test_width_shrinks_with_subsample_size(self, envelope_runs, karras_schedule):
        """Median envelope width strictly decreases over K = 1, 5, 10, 50."""
        report = subsample_envelope(envelope_runs, karras_schedule, [50, 10, 5, 1], 200, seed=2)
        widths = [float(np.median(report.band(k).width)) for k in (1, 5, 10, 50)]
        assert widths[0] > widths[1] > widths[2] > widths[3]

    def test_small_subsets_bracket_reference(self, envelope_runs, karras_schedule):
        """The K = 5 band contains the full-pool factors on at least 95% of steps."""
        report = subsample_envelope(envelope_runs, karras_schedule, [5], 200, seed=2)
        assert report.band(5).contains(report.reference).mean() >= 0.95

    def test_full_size_is_degenerate(self, envelope_runs, karras_schedule):
        """Subsets of every run reproduce the reference exactly."""
        report = subsample_envelope(envelope_runs, karras_schedule, [envelope_runs.runs], 3, seed=1)
        band = report.band(envelope_runs.runs)
        np.testing.assert_array_equal(band.minimum, report.reference)
        np.testing.assert_array_equal(band.maximum, report.reference)

    def test_single_resample_has_zero_width(self, envelope_runs, karras_schedule):
        report = subsample_envelope(envelope_runs, karras_schedule, [10], 1, seed=1)
        band = report.band(10)
        np.testing.assert_array_equal(band.minimum, band.maximum)
        np.testing.assert_array_equal(band.median, band.maximum)

    def test_stress_subsets(self, envelope_runs, karras_schedule):
        """One subset per criterion, with signed picks ordered."""
        report = subsample_envelope(
            envelope_runs, karras_schedule, [10, 5], 40, seed=9, stress_size=5
        )
        by_criterion = {s.criterion: s for s in report.stress}
        assert set(by_criterion) == set(StressCriterion)
        for subset in report.stress:
            assert len(subset.runs) == 5
            assert np.all(np.diff(subset.runs) > 0)
        assert by_criterion[StressCriterion.MAX_ABS_DEVIATION].score >= 0.0
        assert (
            by_criterion[StressCriterion.MAX_SIGNED_DEVIATION].score
            >= by_criterion[StressCriterion.MIN_SIGNED_DEVIATION].score
        )

    def test_reproducible_for_seed(self, envelope_runs, karras_schedule):
        a = subsample_envelope(envelope_runs, karras_schedule, [5], 10, seed=4)
        b = subsample_envelope(envelope_runs, karras_schedule, [5], 10, seed=4)
        np.testing.assert_array_equal(a.band(5).median, b.band(5).median)

    def test_size_above_total_raises(self, envelope_runs, karras_schedule):
        with pytest.raises(InsufficientSamplesError):
            subsample_envelope(envelope_runs, karras_schedule, [envelope_runs.runs + 1], 2, seed=1)

    def test_needs_a_resample(self, envelope_runs, karras_schedule):
        with pytest.raises(ConfigurationError):
            subsample_envelope(envelope_runs, karras_schedule, [5], 0, seed=1)


# =============================================================================
# Run tests
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
