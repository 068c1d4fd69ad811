"""
DriftLab - Binary Artifact Codecs.

Two pinned little-endian layouts:

QDLB (sample batch)
    b"QDLB", u32 version, u32 N, u32 C, u32 L,
    then N*C*L binary64 values, sample-major, channel-major, slot-minor.

QDRM (per-run calibration moments)
    b"QDRM", u32 version, u32 K, u32 M, u32 C, u32 header length,
    header JSON (UTF-8) with keys "meta" and "provenance", then 6*K*M*C
    binary64 values, field-major in the order count, mean_eps_hat,
    mean_delta, m2_eps_hat, m2_delta, comoment.
"""

import json

import numpy as np

from src.core.domain.models import SampleBatch
from src.core.domain.statistics import MOMENT_FIELDS, RunMoments
from src.core.exceptions import ArtifactFormatError


SAMPLE_MAGIC = b"QDLB"
MOMENTS_MAGIC = b"QDRM"
FORMAT_VERSION = 1

_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def _header(magic: bytes, *fields: int) -> bytes:
    return magic + np.asarray((FORMAT_VERSION,) + fields, dtype=_U32).tobytes()


def _read_header(data: bytes, magic: bytes, count: int, source: str) -> tuple[int, ...]:
    size = 4 + 4 * (count + 1)
    if len(data) < size or data[:4] != magic:
        raise ArtifactFormatError(source, f"missing {magic.decode()} header")
    fields = np.frombuffer(data, dtype=_U32, count=count + 1, offset=4)
    if int(fields[0]) != FORMAT_VERSION:
        raise ArtifactFormatError(source, f"unsupported version {int(fields[0])}")
    return tuple(int(v) for v in fields[1:])


# -----------------------------------------------------------------------------
# Sample Batches
# -----------------------------------------------------------------------------

def encode_samples(batch: SampleBatch) -> bytes:
    n, c, l = batch.values.shape
    return _header(SAMPLE_MAGIC, n, c, l) + batch.values.astype(_F64).tobytes(order="C")


def decode_samples(data: bytes, source: str = "<bytes>") -> SampleBatch:
    n, c, l = _read_header(data, SAMPLE_MAGIC, 3, source)
    offset = 20
    expected = offset + 8 * n * c * l
    if len(data) != expected:
        raise ArtifactFormatError(source, f"expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype=_F64, offset=offset).reshape(n, c, l)
    return SampleBatch(values.astype(np.float64))


# -----------------------------------------------------------------------------
# Per-Run Moments
# -----------------------------------------------------------------------------

def encode_run_moments(moments: RunMoments, header_json: str) -> bytes:
    payload = header_json.encode("utf-8")
    k, m, c = moments.count.shape
    body = b"".join(getattr(moments, name).astype(_F64).tobytes(order="C") for name in MOMENT_FIELDS)
    return _header(MOMENTS_MAGIC, k, m, c, len(payload)) + payload + body


def decode_run_moments(data: bytes, source: str = "<bytes>") -> RunMoments:
    k, m, c, length = _read_header(data, MOMENTS_MAGIC, 4, source)
    offset = 24
    body_start = offset + length
    expected = body_start + 8 * len(MOMENT_FIELDS) * k * m * c
    if len(data) != expected:
        raise ArtifactFormatError(source, f"expected {expected} bytes, found {len(data)}")
    try:
        header = json.loads(data[offset:body_start].decode("utf-8"))
        meta, provenance = header["meta"], header["provenance"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ArtifactFormatError(source, f"bad header block: {e}")
    values = np.frombuffer(data, dtype=_F64, offset=body_start).reshape(len(MOMENT_FIELDS), k, m, c)
    fields = (values[i].astype(np.float64) for i in range(len(MOMENT_FIELDS)))
    return RunMoments(*fields, provenance=provenance, meta=meta)
