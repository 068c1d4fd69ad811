"""
DriftLab - Artifact Repository.

File persistence for every command output: calibration tables (JSON),
per-run moment sidecars and sample batches (binary), reports (JSON + CSV).
Every write goes to a temp file first and is renamed into place, so a
failed command never leaves a partial artifact behind.

Usage:
    repo = ArtifactRepository("data/runs/exp1")

    repo.save_table("calibration.json", table, meta)
    table = repo.load_table("data/runs/exp1/calibration.json")

    repo.save_samples("samples.qdlb", batch)
"""

import csv
import io
import json
import logging
import math
import re
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from src.app.calibration import build_table_from_stats
from src.app.schedule import schedule_fingerprint
from src.core.domain.models import FactorGranularity, NoiseSchedule, SampleBatch, SamplerFamily, ScheduleKind
from src.core.domain.statistics import CalibrationTable, RunMoments, StepChannelStats
from src.core.exceptions import ArtifactError, ArtifactFormatError, ArtifactNotFoundError, DriftLabError
from src.infra.utils.binary_format import (
    decode_run_moments,
    decode_samples,
    encode_run_moments,
    encode_samples,
)

logger = logging.getLogger(__name__)

_FLOAT_MARK = "@@f17@@"
_FLOAT_PATTERN = re.compile(r'"' + _FLOAT_MARK + r'([^"]+)"')


# -----------------------------------------------------------------------------
# Encoding Helpers
# -----------------------------------------------------------------------------

def format_number(value: float) -> str:
    """Shortest-safe round-trip text for binary64: 17 significant digits."""
    return format(float(value), ".17g")


def _mark_floats(obj: Any) -> Any:
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        return _FLOAT_MARK + format_number(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _mark_floats(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _mark_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_mark_floats(v) for v in obj]
    return obj


def dumps_json(payload: dict[str, Any]) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits, LF endings."""
    text = json.dumps(_mark_floats(payload), indent=2, sort_keys=True, ensure_ascii=False)
    return _FLOAT_PATTERN.sub(r"\1", text) + "\n"


def canonical_json(payload: dict[str, Any]) -> str:
    return _FLOAT_PATTERN.sub(r"\1", json.dumps(_mark_floats(payload), sort_keys=True, separators=(",", ":")))


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_number(value)
    return str(value)


class ArtifactRepository:
    """
    Atomic artifact persistence under one output directory.

    Every artifact embeds {schema_version, config_hash, seed}: JSON documents
    carry them under "meta", CSV files in a leading comment line.
    """

    def __init__(self, out_dir: str | Path):
        self._out_dir = Path(out_dir)
        try:
            self._out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactError(f"Cannot create output directory: {self._out_dir}", str(e)) from e
        logger.debug(f"Artifact repository at: {self._out_dir}")

    @property
    def out_dir(self) -> Path:
        return self._out_dir

    def path(self, name: str) -> Path:
        return self._out_dir / name

    # -------------------------------------------------------------------------
    # Raw Writes
    # -------------------------------------------------------------------------

    def write_bytes(self, name: str, data: bytes) -> Path:
        """Write to a temp file, then rename into place."""
        path = self.path(name)
        temp_path = path.with_name(path.name + ".tmp")
        try:
            with open(temp_path, "wb") as f:
                f.write(data)
            temp_path.replace(path)
        except OSError as e:
            logger.error(f"Failed to write {path}: {e}")
            if temp_path.exists():
                temp_path.unlink()
            raise ArtifactError(f"Failed to write artifact: {path}", str(e)) from e
        logger.info(f"💾 Wrote {path}")
        return path

    def write_json(self, name: str, payload: dict[str, Any]) -> Path:
        return self.write_bytes(name, dumps_json(payload).encode("utf-8"))

    def write_csv(
        self,
        name: str,
        header: list[str],
        rows: Iterable[Iterable[Any]],
        meta: dict[str, Any],
    ) -> Path:
        buffer = io.StringIO()
        buffer.write(
            f"# schema_version={meta['schema_version']},"
            f"config_hash={meta['config_hash']},seed={meta['seed']}\n"
        )
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])
        return self.write_bytes(name, buffer.getvalue().encode("utf-8"))

    # -------------------------------------------------------------------------
    # Reads
    # -------------------------------------------------------------------------

    @staticmethod
    def read_bytes(path: str | Path) -> bytes:
        path = Path(path)
        if not path.exists():
            raise ArtifactNotFoundError(str(path))
        try:
            return path.read_bytes()
        except OSError as e:
            raise ArtifactError(f"Failed to read artifact: {path}", str(e)) from e

    @classmethod
    def read_json(cls, path: str | Path) -> dict[str, Any]:
        try:
            return json.loads(cls.read_bytes(path).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ArtifactFormatError(str(path), f"invalid JSON: {e}") from e

    # -------------------------------------------------------------------------
    # Samples & Moments
    # -------------------------------------------------------------------------

    def save_samples(self, name: str, batch: SampleBatch) -> Path:
        return self.write_bytes(name, encode_samples(batch))

    @classmethod
    def load_samples(cls, path: str | Path) -> SampleBatch:
        data = cls.read_bytes(path)
        try:
            return decode_samples(data, str(path))
        except ArtifactError:
            raise
        except DriftLabError as e:
            raise ArtifactFormatError(str(path), str(e)) from e

    def save_run_moments(self, name: str, moments: RunMoments, meta: dict[str, Any]) -> Path:
        header = canonical_json({"meta": meta, "provenance": moments.provenance})
        return self.write_bytes(name, encode_run_moments(moments, header))

    @classmethod
    def load_run_moments(cls, path: str | Path) -> RunMoments:
        return decode_run_moments(cls.read_bytes(path), str(path))

    # -------------------------------------------------------------------------
    # Calibration Tables
    # -------------------------------------------------------------------------

    def save_table(self, name: str, table: CalibrationTable, meta: dict[str, Any]) -> Path:
        return self.write_json(name, self.table_to_dict(table, meta))

    @classmethod
    def load_table(cls, path: str | Path, schedule: Optional[NoiseSchedule] = None) -> CalibrationTable:
        """
        Rebuild a table from its stored raw moments.

        Derived values are recomputed, not trusted. When a schedule is given
        its fingerprint must match the table's.
        """
        data = cls.read_json(path)
        try:
            table = cls._dict_to_table(data)
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactFormatError(str(path), f"bad calibration table: {e}") from e
        except DriftLabError as e:
            raise ArtifactFormatError(str(path), str(e)) from e
        if data.get("fingerprint") != table.fingerprint:
            raise ArtifactFormatError(str(path), "schedule fingerprint does not match stored schedule")
        if schedule is not None and schedule_fingerprint(schedule) != table.fingerprint:
            raise ArtifactFormatError(str(path), "table was calibrated on a different schedule")
        logger.info(f"📂 Loaded calibration table ({table.steps} steps x {table.channels} channels)")
        return table

    @staticmethod
    def table_to_dict(table: CalibrationTable, meta: dict[str, Any]) -> dict[str, Any]:
        stats = table.stats
        var_e, var_d, cov = stats.var_eps_hat, stats.var_delta, stats.cov
        steps = []
        for i in range(table.steps):
            channels = []
            for c in range(table.channels):
                channels.append({
                    "count": stats.count[i, c],
                    "mu_eps_hat": stats.mean_eps_hat[i, c],
                    "mu_delta": stats.mean_delta[i, c],
                    "m2_eps_hat": stats.m2_eps_hat[i, c],
                    "m2_delta": stats.m2_delta[i, c],
                    "comoment": stats.comoment[i, c],
                    "var_eps_hat": var_e[i, c],
                    "var_delta": var_d[i, c],
                    "cov": cov[i, c],
                    "V": table.conditional_variance[i, c],
                    "a": table.regression_slope[i, c],
                })
            steps.append({"index": i, "sigma": table.schedule.sigmas[i], "channels": channels})
        return {
            "schema_version": meta["schema_version"],
            "meta": meta,
            "schedule": table.schedule.to_dict(),
            "fingerprint": table.fingerprint,
            "steps": steps,
            "factors": {family.value: table.factors[family].values for family in table.factors},
            "bias_profile": table.regression_slope.mean(axis=1),
            "provenance": table.provenance,
        }

    @staticmethod
    def _dict_to_table(data: dict[str, Any]) -> CalibrationTable:
        sched = data["schedule"]
        schedule = NoiseSchedule(
            sigmas=tuple(float(s) for s in sched["sigmas"]),
            alphas=tuple(float(a) for a in sched["alphas"]),
            kind=ScheduleKind(sched["kind"]),
        )
        fields = ("count", "mu_eps_hat", "mu_delta", "m2_eps_hat", "m2_delta", "comoment")
        arrays = [
            np.array([[float(ch[f]) for ch in step["channels"]] for step in data["steps"]])
            for f in fields
        ]
        stats = StepChannelStats(*arrays)
        provenance = data.get("provenance", {})
        granularity = FactorGranularity(provenance.get("granularity", FactorGranularity.CHANNEL.value))
        table = build_table_from_stats(schedule, stats, provenance, granularity)
        stored = data.get("factors", {})
        for family in SamplerFamily:
            if family.value in stored and np.shape(stored[family.value]) != table.factors[family].values.shape:
                raise ArtifactFormatError("calibration table", f"factor table shape for {family.value}")
        return table
