"""Complex array container format, CSV helpers and image-quality metrics.

Volumes are plain numpy arrays in memory (complex128). On disk they use the
MTTT-ARRAY v1 layout::

    b"MTTTARR1" | uint32 LE header length | UTF-8 JSON header | payload

where the payload is little-endian interleaved (re, im) float32 pairs in
row-major order.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"MTTTARR1"
DTYPE_TOKEN = "c64"
PSNR_CAP_DB = 300.0
MAX_NDIM = 4


class ArrayFormatError(ValueError):
    """Base class for MTTT-ARRAY decoding and validation failures."""


class BadMagicError(ArrayFormatError):
    pass


class UnknownDtypeError(ArrayFormatError):
    pass


class TruncatedPayloadError(ArrayFormatError):
    pass


class ArrayIOError(OSError):
    """Filesystem failure while reading or writing an array file."""


def as_volume(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate ``data`` as a complex volume and return it as complex128.

    If ``shape`` is given the samples are reinterpreted with that shape and
    the element count must match exactly.
    """
    arr = np.asarray(data)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"shape {list(shape)} needs {int(np.prod(shape))} samples, got {arr.size}")
        arr = arr.reshape(shape)
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise ValueError(f"volumes have 1 to {MAX_NDIM} dimensions, got {arr.ndim}")
    if any(s <= 0 for s in arr.shape):
        raise ValueError(f"all extents must be positive, got {list(arr.shape)}")
    arr = arr.astype(np.complex128, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume contains non-finite samples")
    return arr


def dumps_array(data, shape: Sequence[int] | None = None, axis_labels: Sequence[str] = ()) -> bytes:
    arr = as_volume(data, shape)
    labels = [str(a) for a in axis_labels]
    if labels and len(labels) != arr.ndim:
        raise ValueError("axis_labels must name every axis")
    header = json.dumps(
        {"dtype": DTYPE_TOKEN, "shape": list(arr.shape), "axis_labels": labels, "endianness": "little"},
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<c8").tobytes()
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def loads_array(buf: bytes) -> tuple[np.ndarray, dict]:
    """Decode MTTT-ARRAY bytes into ``(volume, header)``."""
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:8])!r}")
    if len(buf) < 12:
        raise TruncatedPayloadError("missing header length")
    (hlen,) = struct.unpack("<I", buf[8:12])
    if len(buf) < 12 + hlen:
        raise TruncatedPayloadError("header truncated")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArrayFormatError(f"unreadable header: {exc}") from exc
    if header.get("dtype") != DTYPE_TOKEN:
        raise UnknownDtypeError(f"unknown dtype token {header.get('dtype')!r}")
    if header.get("endianness", "little") != "little":
        raise ArrayFormatError("only little-endian payloads are supported")
    shape = tuple(int(s) for s in header["shape"])
    need = int(np.prod(shape)) * 8
    payload = buf[12 + hlen :]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, shape {list(shape)} needs {need}")
    if len(payload) > need:
        raise ArrayFormatError(f"payload has {len(payload) - need} trailing bytes")
    arr = np.frombuffer(payload, dtype="<c8").reshape(shape).astype(np.complex128)
    return arr, header


def write_array(data, path, shape: Sequence[int] | None = None, axis_labels: Sequence[str] = ()) -> None:
    buf = dumps_array(data, shape, axis_labels)
    try:
        with open(path, "wb") as fh:
            fh.write(buf)
    except OSError as exc:
        raise ArrayIOError(f"cannot write array to {path}: {exc}") from exc


def read_array(path) -> np.ndarray:
    return read_array_with_header(path)[0]


def read_array_with_header(path) -> tuple[np.ndarray, dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ArrayIOError(f"cannot read array from {path}: {exc}") from exc
    return loads_array(buf)


def psnr(reference, estimate) -> float:
    """Magnitude-image PSNR in dB, normalised by the reference peak.

    Returns ``PSNR_CAP_DB`` when the magnitudes agree exactly.
    """
    ref = np.abs(np.asarray(reference))
    est = np.abs(np.asarray(estimate))
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    peak = ref.max()
    if peak == 0:
        raise ValueError("reference is identically zero")
    rmse = np.sqrt(np.mean((ref - est) ** 2))
    if rmse == 0:
        return PSNR_CAP_DB
    return float(20.0 * np.log10(peak / rmse))


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Render rows as RFC-4180 CSV with a header row and '.' decimals."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return out.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    text = csv_text(header, rows)
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise ArrayIOError(f"cannot write CSV to {path}: {exc}") from exc


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ArrayIOError(f"directory {parent} does not exist")
