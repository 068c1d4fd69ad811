"""
Pytest configuration and fixtures for DriftLab tests.
"""

import sys
from pathlib import Path

import pytest


# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.app.schedule import build_karras_schedule  # noqa: E402
from src.core.domain.models import DataDistribution, NoiseInjectorSpec  # noqa: E402
from src.infra.utils.rng import stream  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte-Carlo acceptance checks")


@pytest.fixture(scope="session")
def project_root_path():
    """Return the project root directory."""
    return project_root


# =============================================================================
# Schedules
# =============================================================================

@pytest.fixture(scope="session")
def karras_schedule():
    """30-step Karras grid over [0.02, 10], rho = 7, terminal zero."""
    return build_karras_schedule(0.02, 10.0, 30, 7.0)


@pytest.fixture(scope="session")
def short_schedule():
    """6-step Karras grid for quick runs."""
    return build_karras_schedule(0.05, 5.0, 6, 7.0)


# =============================================================================
# Distributions & Injectors
# =============================================================================

@pytest.fixture(scope="session")
def gaussian_toy():
    """IsotropicGaussian(s=1), C = 4, L = 16."""
    return DataDistribution.isotropic_gaussian(4, 16, 1.0)


@pytest.fixture(scope="session")
def mixture_toy():
    """Two-component mixture, C = 2, L = 4."""
    return DataDistribution.gaussian_mixture(
        2, 4, weights=[0.3, 0.7], means=[[-1.5, 0.5], [1.0, -0.5]], stds=[0.4, 0.6]
    )


@pytest.fixture
def constant_injector(karras_schedule):
    """Constant JointGaussian injector: rho = 0, s_delta = 0.3, C = 4."""
    return NoiseInjectorSpec.constant(karras_schedule.steps, 4, mean=0.0, std=0.3, rho=0.0)


@pytest.fixture
def rng():
    """Seeded generator for test data."""
    return stream(1234, "tests")


@pytest.fixture
def out_dir(tmp_path):
    """Temporary artifact directory."""
    return tmp_path / "run"
