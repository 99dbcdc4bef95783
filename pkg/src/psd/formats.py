"""Binary model (PSD1) and tensor (TNSR) formats.

PSD1 layout, all little-endian::

    b"PSD1" | u32 n | u32 m | f64 B (column-major, n*m) | f64 W (row-major, m*n)
    | f64 bias (m) | f64 gain (m)

TNSR layout, all little-endian::

    b"TNSR" | u32 rank | u32 dims[rank] | f64 data (row-major)
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Predictor

PSD1_MAGIC = b"PSD1"
TNSR_MAGIC = b"TNSR"
_F64 = np.dtype("<f8")


def atomic_write(path, payload: bytes) -> None:
    """Write ``payload`` to a temporary sibling file, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    end = offset + size
    if end > len(buf):
        raise FormatError(
            f"truncated {what}: expected {size} bytes at offset {offset}, "
            f"only {max(len(buf) - offset, 0)} available"
        )
    return buf[offset:end]


def encode_model(basis, predictor: Predictor) -> bytes:
    basis = np.asarray(basis, dtype=np.float64)
    n, m = basis.shape
    if predictor.filters.shape != (m, n):
        raise FormatError(f"predictor filters {predictor.filters.shape} do not match basis {basis.shape}")
    parts = [
        PSD1_MAGIC,
        struct.pack("<II", n, m),
        basis.astype(_F64).tobytes(order="F"),
        predictor.filters.astype(_F64).tobytes(order="C"),
        predictor.bias.astype(_F64).tobytes(),
        predictor.gain.astype(_F64).tobytes(),
    ]
    return b"".join(parts)


def decode_model(buf: bytes) -> tuple[np.ndarray, Predictor]:
    magic = _take(buf, 0, 4, "magic")
    if magic != PSD1_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PSD1_MAGIC!r}")
    n, m = struct.unpack("<II", _take(buf, 4, 8, "header"))
    off = 12
    sizes = {"basis": n * m, "filters": m * n, "bias": m, "gain": m}
    arrays = {}
    for name, count in sizes.items():
        raw = _take(buf, off, 8 * count, name)
        arrays[name] = np.frombuffer(raw, dtype=_F64).astype(np.float64)
        off += 8 * count
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after model payload")
    basis = arrays["basis"].reshape((n, m), order="F")
    pred = Predictor(
        gain=arrays["gain"],
        filters=arrays["filters"].reshape((m, n)),
        bias=arrays["bias"],
    )
    return basis, pred


def save_model(path, basis, predictor: Predictor) -> None:
    atomic_write(path, encode_model(basis, predictor))


def load_model(path) -> tuple[np.ndarray, Predictor]:
    return decode_model(Path(path).read_bytes())


def encode_tensor(array) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    header = TNSR_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array).astype(_F64).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    magic = _take(buf, 0, 4, "magic")
    if magic != TNSR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TNSR_MAGIC!r}")
    (rank,) = struct.unpack("<I", _take(buf, 4, 4, "rank"))
    dims = struct.unpack(f"<{rank}I", _take(buf, 8, 4 * rank, "dims"))
    off = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    raw = _take(buf, off, 8 * count, "data")
    if off + 8 * count != len(buf):
        raise FormatError(f"{len(buf) - off - 8 * count} trailing bytes after tensor payload")
    return np.frombuffer(raw, dtype=_F64).astype(np.float64).reshape(dims)


def save_tensor(path, array) -> None:
    atomic_write(path, encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
