"""Binary containers for simulated power traces and their ground truth.

Trace files: magic "SSNTRACE", little-endian u32 version (1), u32 trace
count, u32 samples per trace, u32 metadata byte length, the metadata as
UTF-8 key=value lines, then the sample matrix as raw float32, row major.

Label files: magic "SSNLABEL", u32 version (1), u32 record count, u32
outer iteration count, u32 inner iteration count, then one fixed-width
record per trace: u32 record index, i32 signed coefficient value, and an
LSB-first packed bitfield of outer_count * (inner_count + 1) mask bits
(inner positions 1..inner_count, then the sign bit, per outer iteration).

Both writers are atomic (temp file in the target directory, then rename)
and byte-deterministic for identical input; metadata keys are sorted on
write. Readers are strict: anything structurally off raises instead of
guessing.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    DimensionError,
    DomainError,
    NonFiniteSample,
    TraceFormatError,
    TruncatedFile,
    UnsupportedVersion,
)

TRACE_MAGIC = b"SSNTRACE"
LABEL_MAGIC = b"SSNLABEL"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<IIII")
_LABEL_HEADER = struct.Struct("<IIII")


@dataclass
class TraceSet:
    """A batch of equal-length traces plus free-form metadata strings."""

    samples: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def n_traces(self) -> int:
        return int(self.samples.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[1])


def _check_metadata(metadata: dict[str, str]) -> None:
    for k, v in metadata.items():
        if not isinstance(k, str) or not isinstance(v, str):
            raise DomainError("metadata keys and values must be strings")
        if not k or "=" in k or "\n" in k:
            raise DomainError(f"bad metadata key {k!r}")
        if "\n" in v:
            raise DomainError(f"metadata value for {k!r} contains newline")


def _encode_metadata(metadata: dict[str, str]) -> bytes:
    lines = [f"{k}={metadata[k]}" for k in sorted(metadata)]
    if not lines:
        return b""
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_metadata(blob: bytes) -> dict[str, str]:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceFormatError(f"metadata is not valid UTF-8: {exc}") from None
    out: dict[str, str] = {}
    for line in text.split("\n"):
        if not line:
            continue
        if "=" not in line:
            raise TraceFormatError(f"metadata line without '=': {line!r}")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _atomic_write(path, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_trace_set(trace_set: TraceSet, path) -> None:
    """Serialize a TraceSet; the file appears atomically or not at all."""
    samples = np.asarray(trace_set.samples)
    if samples.ndim != 2:
        raise DimensionError(f"samples must be 2-D, got shape {samples.shape}")
    samples = samples.astype("<f4", copy=False)
    if samples.size and not np.isfinite(samples).all():
        raise NonFiniteSample("refusing to write NaN or infinite samples")
    _check_metadata(trace_set.metadata)
    meta = _encode_metadata(trace_set.metadata)
    header = TRACE_MAGIC + _HEADER.pack(
        FORMAT_VERSION, samples.shape[0], samples.shape[1], len(meta)
    )
    _atomic_write(path, header + meta + np.ascontiguousarray(samples).tobytes())


def read_trace_set(path) -> TraceSet:
    """Read a trace file back, verifying structure and finiteness."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(TRACE_MAGIC):
        raise TruncatedFile("file too short for magic")
    if blob[: len(TRACE_MAGIC)] != TRACE_MAGIC:
        raise BadMagic(f"expected {TRACE_MAGIC!r}")
    off = len(TRACE_MAGIC)
    if len(blob) < off + _HEADER.size:
        raise TruncatedFile("file too short for header")
    version, n_traces, n_samples, meta_len = _HEADER.unpack_from(blob, off)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"version {version} not supported")
    off += _HEADER.size
    if len(blob) < off + meta_len:
        raise TruncatedFile("metadata extends past end of file")
    metadata = _decode_metadata(blob[off : off + meta_len])
    off += meta_len
    payload = n_traces * n_samples * 4
    if len(blob) < off + payload:
        raise TruncatedFile(
            f"payload needs {payload} bytes, file has {len(blob) - off}"
        )
    if len(blob) > off + payload:
        raise TraceFormatError("trailing bytes after payload")
    samples = np.frombuffer(blob, dtype="<f4", count=n_traces * n_samples, offset=off)
    samples = samples.reshape(n_traces, n_samples).copy()
    if samples.size and not np.isfinite(samples).all():
        raise NonFiniteSample("trace payload contains NaN or infinity")
    return TraceSet(samples=samples, metadata=metadata)


@dataclass
class LabelSet:
    """Ground truth for a trace set, one record per trace.

    values[i] is the signed coefficient; inner_bits[i, u, k-1] says
    whether inner iteration k of outer iteration u latched (mask all
    ones); neg_bits[i, u] is the sign draw.
    """

    values: np.ndarray
    inner_bits: np.ndarray
    neg_bits: np.ndarray

    @property
    def n_records(self) -> int:
        return int(self.values.shape[0])

    @property
    def outer_count(self) -> int:
        return int(self.inner_bits.shape[1])

    @property
    def inner_count(self) -> int:
        return int(self.inner_bits.shape[2])


def _check_label_shapes(labels: LabelSet) -> tuple[int, int, int]:
    values = np.asarray(labels.values)
    inner = np.asarray(labels.inner_bits)
    neg = np.asarray(labels.neg_bits)
    if values.ndim != 1 or inner.ndim != 3 or neg.ndim != 2:
        raise DimensionError("labels have wrong rank")
    n = values.shape[0]
    if inner.shape[0] != n or neg.shape[0] != n:
        raise DimensionError("label arrays disagree on record count")
    if inner.shape[1] != neg.shape[1]:
        raise DimensionError("label arrays disagree on outer count")
    if inner.shape[1] < 1 or inner.shape[2] < 1:
        raise DimensionError("outer and inner counts must be positive")
    return n, inner.shape[1], inner.shape[2]


def write_label_set(labels: LabelSet, path) -> None:
    """Serialize a LabelSet with the same atomicity guarantees as traces."""
    n, outer, inner = _check_label_shapes(labels)
    bits = np.concatenate(
        [
            np.asarray(labels.inner_bits, dtype=np.uint8).reshape(n, outer, inner),
            np.asarray(labels.neg_bits, dtype=np.uint8).reshape(n, outer, 1),
        ],
        axis=2,
    ).reshape(n, outer * (inner + 1))
    packed = np.packbits(bits, axis=1, bitorder="little")
    record = np.zeros(
        n,
        dtype=np.dtype(
            [("idx", "<u4"), ("val", "<i4"), ("bits", "u1", (packed.shape[1],))]
        ),
    )
    record["idx"] = np.arange(n, dtype="<u4")
    record["val"] = np.asarray(labels.values, dtype="<i4")
    record["bits"] = packed
    header = LABEL_MAGIC + _LABEL_HEADER.pack(FORMAT_VERSION, n, outer, inner)
    _atomic_write(path, header + record.tobytes())


def read_label_set(path) -> LabelSet:
    """Read a label file back, verifying counts and record indices."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(LABEL_MAGIC):
        raise TruncatedFile("file too short for magic")
    if blob[: len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise BadMagic(f"expected {LABEL_MAGIC!r}")
    off = len(LABEL_MAGIC)
    if len(blob) < off + _LABEL_HEADER.size:
        raise TruncatedFile("file too short for header")
    version, n, outer, inner = _LABEL_HEADER.unpack_from(blob, off)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"version {version} not supported")
    if outer < 1 or inner < 1:
        raise TraceFormatError("outer and inner counts must be positive")
    off += _LABEL_HEADER.size
    nbytes = (outer * (inner + 1) + 7) // 8
    rec_dtype = np.dtype([("idx", "<u4"), ("val", "<i4"), ("bits", "u1", (nbytes,))])
    need = n * rec_dtype.itemsize
    if len(blob) - off < need:
        raise TruncatedFile(f"records need {need} bytes, file has {len(blob) - off}")
    if len(blob) - off > need:
        raise TraceFormatError("trailing bytes after records")
    records = np.frombuffer(blob, dtype=rec_dtype, count=n, offset=off)
    if not np.array_equal(records["idx"], np.arange(n, dtype=np.uint32)):
        raise TraceFormatError("record indices out of order")
    if n:
        bits = np.unpackbits(records["bits"], axis=1, bitorder="little")
    else:
        bits = np.zeros((0, nbytes * 8), dtype=np.uint8)
    bits = bits[:, : outer * (inner + 1)].reshape(n, outer, inner + 1)
    return LabelSet(
        values=records["val"].astype(np.int32),
        inner_bits=bits[:, :, :inner].astype(bool),
        neg_bits=bits[:, :, inner].astype(bool),
    )
