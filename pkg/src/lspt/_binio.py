"""Little-endian helpers shared by the weight, bank and dataset formats."""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FileIOError, FormatError

F32 = np.dtype("<f4")


def pack_floats(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=F32).tobytes() for a in arrays)


def unpack_floats(buf: bytes, offset: int, shapes) -> tuple[list[np.ndarray], int]:
    out = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(buf):
            raise FileIOError(f"file truncated: need {end} bytes, have {len(buf)}")
        out.append(np.frombuffer(buf, dtype=F32, count=n, offset=offset).astype(np.float64).reshape(shape))
        offset = end
    return out, offset


def read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FileIOError(f"cannot read {os.fspath(path)}: {exc.strerror}") from exc


def write_file(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise FileIOError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def read_header(buf: bytes, magic: bytes, fmt: str, what: str) -> tuple:
    """Check magic and version 1, then unpack ``fmt`` (little-endian) after them."""
    n = len(magic)
    if len(buf) < n + 2:
        raise FileIOError(f"{what} file truncated inside header")
    if buf[:n] != magic:
        raise FormatError(f"{what} file has bad magic {buf[:n]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", buf, n)
    if version != 1:
        raise FormatError(f"{what} file version {version} is not supported (expected 1)")
    size = struct.calcsize("<" + fmt)
    if len(buf) < n + 2 + size:
        raise FileIOError(f"{what} file truncated inside header")
    return struct.unpack_from("<" + fmt, buf, n + 2), n + 2 + size


def as_f32_exact(a: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 value, kept as float64."""
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)
