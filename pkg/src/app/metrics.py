"""
DriftLab - Distributional Metrics.

Per-channel moment reports and the energy-distance two-sample test used in
place of image-level metrics.
"""

from __future__ import annotations

import hashlib
import logging
import math
from typing import Literal, Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform

from src.core.domain.models import SampleBatch
from src.core.domain.reports import MarginalReport
from src.core.exceptions import ConfigurationError, InsufficientSamplesError, ShapeMismatchError
from src.infra.utils.rng import stream


logger = logging.getLogger(__name__)

DEFAULT_MAX_SAMPLES = 4000
PERMUTATION_CHUNK = 64


def moment_report(
    samples: SampleBatch,
    target: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> MarginalReport:
    """
    Per-channel mean and variance pooled over samples and slots.

    Standard errors treat the N * L pooled values as independent draws.
    """
    if samples.n < 2:
        raise InsufficientSamplesError("moment report", 2, samples.n)
    per_channel = np.moveaxis(samples.values, 1, 0).reshape(samples.channels, -1)
    count = per_channel.shape[1]
    mean = per_channel.mean(axis=1)
    variance = per_channel.var(axis=1, ddof=1)

    target_mean = target_variance = None
    if target is not None:
        target_mean = np.asarray(target[0], dtype=np.float64)
        target_variance = np.asarray(target[1], dtype=np.float64)
        if target_mean.shape != mean.shape or target_variance.shape != mean.shape:
            raise ShapeMismatchError("analytic target", mean.shape, target_mean.shape)

    return MarginalReport(
        n=samples.n,
        mean=mean,
        variance=variance,
        mean_se=np.sqrt(variance / count),
        variance_se=variance * math.sqrt(2.0 / (count - 1)),
        target_mean=target_mean,
        target_variance=target_variance,
    )


def _content_word(values: np.ndarray) -> int:
    data = np.ascontiguousarray(values, dtype=np.float64).tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _subsample(values: np.ndarray, cap: int, seed: int) -> np.ndarray:
    """Rows kept above the cap, drawn from a stream keyed on the set's contents."""
    if len(values) <= cap:
        return values
    logger.warning(f"⚠️ Subsampling {len(values)} rows to {cap} for energy distance")
    rng = stream(seed, "energy-subsample", _content_word(values))
    picks = np.sort(rng.choice(len(values), size=cap, replace=False))
    return values[picks]


def _block_means(
    within_a: float, within_b: float, between: float, n_a: int, n_b: int, stat_type: str
) -> float:
    if stat_type == "u":
        m_aa = within_a / (n_a * (n_a - 1)) if n_a > 1 else 0.0
        m_bb = within_b / (n_b * (n_b - 1)) if n_b > 1 else 0.0
    else:
        m_aa = within_a / (n_a * n_a)
        m_bb = within_b / (n_b * n_b)
    m_ab = between / (n_a * n_b)
    return 2.0 * m_ab - (m_aa + m_bb)


def energy_distance(
    a: SampleBatch,
    b: SampleBatch,
    n_permutations: int,
    seed: int,
    stat_type: Literal["u", "v"] = "u",
    max_samples: int = DEFAULT_MAX_SAMPLES,
) -> tuple[float, float]:
    """
    E-statistic 2 E|X - Y| - E|X - X'| - E|Y - Y'| with a permutation p-value.

    The p-value is (1 + #{permuted >= observed}) / (1 + n_permutations).
    Identical inputs return (0.0, 1.0).
    """
    if stat_type not in ("u", "v"):
        raise ConfigurationError("stat_type must be 'u' or 'v'", f"got {stat_type!r}")
    if n_permutations < 0:
        raise ConfigurationError("n_permutations must be >= 0", f"got {n_permutations}")
    xa, xb = a.flat(), b.flat()
    if xa.shape[1] != xb.shape[1]:
        raise ShapeMismatchError("energy distance dimensionality", xa.shape[1], xb.shape[1])
    if xa.shape == xb.shape and np.array_equal(xa, xb):
        return 0.0, 1.0

    xa = _subsample(xa, max_samples, seed)
    xb = _subsample(xb, max_samples, seed)
    n_a, n_b = len(xa), len(xb)
    n = n_a + n_b

    distances = squareform(pdist(np.vstack([xa, xb]), metric="euclidean"))
    observed = _block_means(
        math.fsum(distances[:n_a, :n_a].ravel()),
        math.fsum(distances[n_a:, n_a:].ravel()),
        math.fsum(distances[:n_a, n_a:].ravel()),
        n_a, n_b, stat_type,
    )
    if n_permutations == 0:
        return observed, 1.0

    rng = stream(seed, "energy-permutation")
    row_sums = distances.sum(axis=1)
    total = row_sums.sum()
    exceed = 0
    for start in range(0, n_permutations, PERMUTATION_CHUNK):
        size = min(PERMUTATION_CHUNK, n_permutations - start)
        indicator = np.zeros((n, size))
        for column in range(size):
            indicator[rng.permutation(n)[:n_a], column] = 1.0
        projected = distances @ indicator
        within_a = (indicator * projected).sum(axis=0)
        between = indicator.T @ row_sums - within_a
        within_b = total - 2.0 * between - within_a
        permuted = np.array([
            _block_means(wa, wb, ab, n_a, n_b, stat_type)
            for wa, wb, ab in zip(within_a, within_b, between)
        ])
        exceed += int(np.count_nonzero(permuted >= observed))

    p_value = (exceed + 1) / (n_permutations + 1)
    logger.debug(f"Energy distance {observed:.6g} (p={p_value:.4g}, {n_permutations} permutations)")
    return observed, p_value
