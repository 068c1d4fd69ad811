"""
DriftLab - Configuration Management.

Uses pydantic-settings for environment variable loading with validation.
Experiment parameters live in the JSON config document (see src/api/schemas.py);
these settings only cover process-level knobs.
"""

import logging
from functools import lru_cache
from typing import Literal, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


# -----------------------------------------------------------------------------
# Fixed numerics
# -----------------------------------------------------------------------------
# These shape artifact contents, so they are not environment-overridable.

RUN_BLOCK_SIZE = 256  # Rows per RNG block; results do not depend on threads
NORMALITY_NULL_REPLICATES = 10_000
CLEAN_MOMENT_PREPASS_SAMPLES = 10_000


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # -------------------------------------------------------------------------
    # Parallelism
    # -------------------------------------------------------------------------
    DRIFTLAB_THREADS: int = 1  # Overridden by --threads

    # -------------------------------------------------------------------------
    # Application Settings
    # -------------------------------------------------------------------------
    LOG_LEVEL: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"

    # -------------------------------------------------------------------------
    # Paths
    # -------------------------------------------------------------------------
    DEFAULT_OUTPUT_DIR: str = "data/runs"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def resolve_threads(cli_value: Optional[int] = None) -> int:
    """Thread count: CLI flag first, then DRIFTLAB_THREADS."""
    if cli_value is not None:
        return max(1, cli_value)
    return max(1, get_settings().DRIFTLAB_THREADS)


def configure_logging() -> None:
    """Configure application logging based on settings."""
    settings = get_settings()

    log_format = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
    date_format = "%Y-%m-%d %H:%M:%S"

    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL),
        format=log_format,
        datefmt=date_format,
    )
