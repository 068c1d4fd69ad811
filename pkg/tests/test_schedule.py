"""
Unit tests for noise schedules.
"""

import math

import numpy as np
import pytest

from src.app.schedule import (
    build_karras_schedule,
    build_logsnr_schedule,
    delta_sigma,
    delta_sigma_bar,
    logsnr_quantities,
    schedule_fingerprint,
    schedule_from_sigmas,
    sigma_bar,
)
from src.core.domain.models import ScheduleKind
from src.core.exceptions import InvalidScheduleError, StepIndexError


class TestKarrasSchedule:
    """Karras grid construction."""

    def test_endpoints_and_terminal_zero(self, karras_schedule):
        """Grid starts at sigma_max, ends at sigma_min, then zero."""
        assert karras_schedule.steps == 30
        assert karras_schedule.sigmas[0] == 10.0
        assert karras_schedule.sigmas[-2] == 0.02
        assert karras_schedule.sigmas[-1] == 0.0

    def test_strictly_decreasing(self, karras_schedule):
        """Every delta_sigma is negative."""
        assert all(delta_sigma(karras_schedule, i) < 0.0 for i in range(karras_schedule.steps))

    def test_matches_power_interpolation_elementwise(self, karras_schedule):
        """Level i is (s_max^(1/7) + i/29 (s_min^(1/7) - s_max^(1/7)))^7."""
        lo, hi = 0.02 ** (1.0 / 7.0), 10.0 ** (1.0 / 7.0)
        expected = [(hi + i / 29.0 * (lo - hi)) ** 7.0 for i in range(30)]
        np.testing.assert_allclose(karras_schedule.sigmas[:-1], expected, rtol=1e-12)

    @pytest.mark.parametrize("sigma_min,sigma_max,rho", [(0.002, 80.0, 7.0), (0.02, 10.0, 3.0), (0.1, 1.0, 1.0)])
    def test_strictly_decreasing_at_ten_thousand_steps(self, sigma_min, sigma_max, rho):
        schedule = build_karras_schedule(sigma_min, sigma_max, 10_000, rho)
        assert np.all(np.diff(schedule.sigma_array) < 0.0)

    def test_delta_sigma_telescopes(self, karras_schedule):
        """Summed steps run from sigma_0 to the terminal zero."""
        total = sum(delta_sigma(karras_schedule, i) for i in range(karras_schedule.steps))
        assert total == pytest.approx(karras_schedule.sigmas[-1] - karras_schedule.sigmas[0], rel=1e-12)

    def test_single_step(self):
        """steps = 1 gives [sigma_max, 0]."""
        schedule = build_karras_schedule(0.1, 3.0, 1)
        assert schedule.sigmas == (3.0, 0.0)

    def test_rho_one_is_linear(self):
        """rho = 1 interpolates linearly."""
        schedule = build_karras_schedule(1.0, 5.0, 5, rho=1.0)
        np.testing.assert_allclose(schedule.sigmas[:-1], [5.0, 4.0, 3.0, 2.0, 1.0], rtol=1e-12)

    @pytest.mark.parametrize("args", [
        (0.0, 1.0, 10),
        (2.0, 1.0, 10),
        (0.1, 1.0, 0),
        (0.1, math.inf, 10),
        (0.1, 1.0, 10, -1.0),
    ])
    def test_invalid_parameters(self, args):
        """Bad ranges, zero steps and non-finite values are rejected."""
        with pytest.raises(InvalidScheduleError):
            build_karras_schedule(*args)

    def test_sigma_bar_equals_sigma(self, karras_schedule):
        """alpha = 1, so sigma_bar is sigma and delta_sigma_bar is delta_sigma."""
        for i in range(karras_schedule.steps):
            assert sigma_bar(karras_schedule, i) == karras_schedule.sigmas[i]
            assert delta_sigma_bar(karras_schedule, i) == delta_sigma(karras_schedule, i)


class TestExplicitSchedules:
    """Explicit grids and validation."""

    def test_non_monotone_rejected(self):
        """A rising level is rejected."""
        with pytest.raises(InvalidScheduleError):
            schedule_from_sigmas([3.0, 4.0, 0.0])

    def test_inner_zero_rejected(self):
        """Only the last level may be zero."""
        with pytest.raises(InvalidScheduleError):
            schedule_from_sigmas([3.0, 0.0, -1.0])

    def test_karras_requires_unit_alpha(self):
        """KarrasVE grids reject alpha != 1."""
        with pytest.raises(InvalidScheduleError):
            schedule_from_sigmas([2.0, 1.0], [0.5, 1.0])

    def test_step_index_out_of_range(self, short_schedule):
        """delta_sigma at i = M raises."""
        with pytest.raises(StepIndexError):
            delta_sigma(short_schedule, short_schedule.steps)


class TestLogSNR:
    """Log-SNR quantities and the variance-preserving grid."""

    def test_logsnr_of_explicit_level(self):
        """alpha = 0.8, sigma = 0.6 gives lambda = log(4/3), sigma_bar = 0.75."""
        schedule = schedule_from_sigmas([0.6, 0.3], [0.8, 0.9], ScheduleKind.LOG_SNR)
        lam, sb = logsnr_quantities(schedule, 0)
        assert lam == pytest.approx(math.log(0.8 / 0.6), rel=1e-15)
        assert sb == pytest.approx(0.75, rel=1e-15)

    @pytest.mark.parametrize("schedule", [
        build_karras_schedule(0.02, 10.0, 30),
        build_logsnr_schedule(-3.5, 3.5, 40),
    ])
    def test_exp_of_negative_lambda_is_sigma_bar(self, schedule):
        """exp(-lambda) reproduces sigma_bar within 4 ulp at every nonzero level."""
        for i in range(schedule.steps + 1):
            if schedule.sigmas[i] == 0.0:
                continue
            lam, sb = logsnr_quantities(schedule, i)
            assert abs(math.exp(-lam) - sb) <= 4 * math.ulp(sb)

    def test_logsnr_undefined_at_zero(self, short_schedule):
        """Terminal zero has no log-SNR."""
        with pytest.raises(InvalidScheduleError):
            logsnr_quantities(short_schedule, short_schedule.steps)

    def test_vp_grid_is_uniform_in_lambda(self):
        """lambda steps are equal and alpha^2 + sigma^2 = 1."""
        schedule = build_logsnr_schedule(-4.0, 4.0, 8)
        lambdas = [logsnr_quantities(schedule, i)[0] for i in range(schedule.steps + 1)]
        np.testing.assert_allclose(np.diff(lambdas), 1.0, rtol=1e-10)
        np.testing.assert_allclose(schedule.alpha_array ** 2 + schedule.sigma_array ** 2, 1.0, rtol=1e-12)

    def test_vp_grid_rejects_reversed_range(self):
        with pytest.raises(InvalidScheduleError):
            build_logsnr_schedule(1.0, -1.0, 4)


class TestFingerprint:
    """Schedule fingerprints."""

    def test_stable_across_rebuilds(self):
        """Same parameters give the same fingerprint."""
        a = build_karras_schedule(0.02, 10.0, 30)
        b = build_karras_schedule(0.02, 10.0, 30)
        assert schedule_fingerprint(a) == schedule_fingerprint(b)

    def test_changes_with_grid(self):
        """Different step counts give different fingerprints."""
        a = build_karras_schedule(0.02, 10.0, 30)
        b = build_karras_schedule(0.02, 10.0, 31)
        assert schedule_fingerprint(a) != schedule_fingerprint(b)


# =============================================================================
# Run tests
# =============================================================================

if __name__ == "__main__":
    pytest.main([__file__, "-v"])
