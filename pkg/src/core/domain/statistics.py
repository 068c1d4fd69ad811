"""
DriftLab - Streaming Statistics Models.

Second-order moments of the paired (eps_hat, delta_eps) outputs, kept as raw
centered moments so they merge exactly (Chan/Welford parallel update) and so
every derived quantity can be recomputed from what is stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from src.core.domain.models import DriftFactors, NoiseSchedule, SamplerFamily
from src.core.exceptions import ShapeMismatchError


MOMENT_FIELDS = ("count", "mean_eps_hat", "mean_delta", "m2_eps_hat", "m2_delta", "comoment")


def batch_moments(eps_hat: np.ndarray, delta: np.ndarray, axis: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    """Raw moments of paired arrays, reduced over the given axes."""
    if eps_hat.shape != delta.shape:
        raise ShapeMismatchError("paired outputs", eps_hat.shape, delta.shape)
    mean_e = eps_hat.mean(axis=axis, keepdims=True)
    count = np.full(np.squeeze(mean_e, axis=axis).shape, eps_hat.size / mean_e.size)
    mean_d = delta.mean(axis=axis, keepdims=True)
    de = eps_hat - mean_e
    dd = delta - mean_d
    return (
        count,
        np.squeeze(mean_e, axis=axis),
        np.squeeze(mean_d, axis=axis),
        (de * de).sum(axis=axis),
        (dd * dd).sum(axis=axis),
        (de * dd).sum(axis=axis),
    )


def merge_moments(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
    """Chan et al. pairwise merge of two raw-moment tuples (elementwise)."""
    n_a, me_a, md_a, m2e_a, m2d_a, co_a = a
    n_b, me_b, md_b, m2e_b, m2d_b, co_b = b
    n = n_a + n_b
    safe_n = np.where(n > 0, n, 1.0)
    frac_b = n_b / safe_n
    delta_e = me_b - me_a
    delta_d = md_b - md_a
    weight = n_a * n_b / safe_n
    return (
        n,
        me_a + delta_e * frac_b,
        md_a + delta_d * frac_b,
        m2e_a + m2e_b + delta_e * delta_e * weight,
        m2d_a + m2d_b + delta_d * delta_d * weight,
        co_a + co_b + delta_e * delta_d * weight,
    )


def pool_moments(moments: Sequence[np.ndarray], axis: int = 0) -> tuple[np.ndarray, ...]:
    """Pool many raw-moment records along an axis in closed form."""
    n_k, me_k, md_k, m2e_k, m2d_k, co_k = moments
    n = n_k.sum(axis=axis)
    safe_n = np.where(n > 0, n, 1.0)
    me = (n_k * me_k).sum(axis=axis) / safe_n
    md = (n_k * md_k).sum(axis=axis) / safe_n
    de = me_k - np.expand_dims(me, axis)
    dd = md_k - np.expand_dims(md, axis)
    return (
        n,
        me,
        md,
        m2e_k.sum(axis=axis) + (n_k * de * de).sum(axis=axis),
        m2d_k.sum(axis=axis) + (n_k * dd * dd).sum(axis=axis),
        co_k.sum(axis=axis) + (n_k * de * dd).sum(axis=axis),
    )


# -----------------------------------------------------------------------------
# Step/Channel Statistics
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StepChannelStats:
    """
    Per-step, per-channel moments of (eps_hat, delta_eps).

    Arrays have shape (M, C); moments are pooled over samples and over the
    L slots of each channel.
    """

    count: np.ndarray
    mean_eps_hat: np.ndarray
    mean_delta: np.ndarray
    m2_eps_hat: np.ndarray
    m2_delta: np.ndarray
    comoment: np.ndarray

    def __post_init__(self) -> None:
        shape = np.shape(self.count)
        for name in MOMENT_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape or arr.ndim != 2:
                raise ShapeMismatchError(f"stats field '{name}'", shape, arr.shape)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, steps: int, channels: int) -> "StepChannelStats":
        zeros = np.zeros((steps, channels))
        return cls(*(zeros for _ in MOMENT_FIELDS))

    @classmethod
    def from_moments(cls, moments: Sequence[np.ndarray]) -> "StepChannelStats":
        return cls(*moments)

    @property
    def moments(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in MOMENT_FIELDS)

    @property
    def steps(self) -> int:
        return self.count.shape[0]

    @property
    def channels(self) -> int:
        return self.count.shape[1]

    def _normalize(self, m2: np.ndarray) -> np.ndarray:
        dof = self.count - 1.0
        return np.where(dof > 0, m2 / np.where(dof > 0, dof, 1.0), 0.0)

    @property
    def var_eps_hat(self) -> np.ndarray:
        return np.maximum(self._normalize(self.m2_eps_hat), 0.0)

    @property
    def var_delta(self) -> np.ndarray:
        return np.maximum(self._normalize(self.m2_delta), 0.0)

    @property
    def cov(self) -> np.ndarray:
        return self._normalize(self.comoment)

    def merge(self, other: "StepChannelStats") -> "StepChannelStats":
        """Stats of the union of two disjoint accumulations."""
        if self.count.shape != other.count.shape:
            raise ShapeMismatchError("stats merge", self.count.shape, other.count.shape)
        return StepChannelStats.from_moments(merge_moments(self.moments, other.moments))


class MomentAccumulator:
    """
    Single-writer streaming accumulator for StepChannelStats.

    Usage:
        acc = MomentAccumulator(steps, channels)
        acc.update(step, eps_hat, delta)   # arrays shaped (N, C, L)
        stats = acc.freeze()
    """

    def __init__(self, steps: int, channels: int):
        self._moments = [np.zeros((steps, channels)) for _ in MOMENT_FIELDS]

    def update(self, step: int, eps_hat: np.ndarray, delta: np.ndarray) -> None:
        batch = batch_moments(eps_hat, delta, axis=(0, 2))
        current = [m[step] for m in self._moments]
        merged = merge_moments(current, batch)
        for target, value in zip(self._moments, merged):
            target[step] = value

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        merged = merge_moments(self._moments, other._moments)
        self._moments = [np.array(m) for m in merged]
        return self

    def freeze(self) -> StepChannelStats:
        return StepChannelStats.from_moments(self._moments)


# -----------------------------------------------------------------------------
# Per-Run Moments
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RunMoments:
    """Raw moments kept per calibration run, arrays shaped (K, M, C)."""

    count: np.ndarray
    mean_eps_hat: np.ndarray
    mean_delta: np.ndarray
    m2_eps_hat: np.ndarray
    m2_delta: np.ndarray
    comoment: np.ndarray
    provenance: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)  # stamped when written

    def __post_init__(self) -> None:
        shape = np.shape(self.count)
        for name in MOMENT_FIELDS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape or arr.ndim != 3:
                raise ShapeMismatchError(f"run moments field '{name}'", shape, arr.shape)
            object.__setattr__(self, name, arr)

    @classmethod
    def concatenate(cls, parts: Sequence["RunMoments"], provenance: Optional[dict] = None) -> "RunMoments":
        fields = [np.concatenate([getattr(p, name) for p in parts], axis=0) for name in MOMENT_FIELDS]
        return cls(*fields, provenance=dict(provenance or {}))

    @property
    def moments(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in MOMENT_FIELDS)

    @property
    def runs(self) -> int:
        return self.count.shape[0]

    @property
    def steps(self) -> int:
        return self.count.shape[1]

    @property
    def channels(self) -> int:
        return self.count.shape[2]

    def pooled(self, runs: Optional[np.ndarray] = None) -> StepChannelStats:
        """StepChannelStats of all runs, or of the selected run indices."""
        moments = self.moments
        if runs is not None:
            moments = tuple(m[np.asarray(runs)] for m in moments)
        return StepChannelStats.from_moments(pool_moments(moments, axis=0))


# -----------------------------------------------------------------------------
# Calibration Table
# -----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CalibrationTable:
    """
    Output of offline calibration.

    Raw moments are the source of truth; V, a and the per-family factor
    tables are cached derivations of them.
    """

    schedule: NoiseSchedule
    fingerprint: str
    stats: StepChannelStats
    conditional_variance: np.ndarray
    regression_slope: np.ndarray
    factors: dict[SamplerFamily, DriftFactors]
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.stats.steps

    @property
    def channels(self) -> int:
        return self.stats.channels

    def factors_for(self, family: SamplerFamily) -> DriftFactors:
        return self.factors[family]
