"""NCLT binary tensor files.

A record is::

    b"NCLT" | u8 version (1) | u8 rank | rank x u32 LE extents | f32 LE payload

in row-major order. Checkpoints and other multi-tensor files are
*containers*: one ``b"NCLJ" | u32 LE length | UTF-8 JSON`` header block
followed by NCLT records in the order listed under the header's
``"tensors"`` key.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"NCLT"
HEADER_MAGIC = b"NCLJ"
VERSION = 1


class FormatError(ValueError):
    """Raised for malformed NCLT data."""


def _write_record(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    fh.write(MAGIC + struct.pack("<BB", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated NCLT data: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_record(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if version != VERSION:
        raise FormatError(f"unsupported NCLT version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


class TensorWriter:
    """Streams a tensor of known shape to disk one leading-axis slice at a time."""

    def __init__(self, path: str | os.PathLike, shape: tuple[int, ...]):
        self.path = Path(path)
        self.shape = tuple(int(n) for n in shape)
        self._row = self.shape[1:]
        self._written = 0
        self._tmp = Path(str(path) + ".tmp")
        self._fh = open(self._tmp, "wb")
        self._fh.write(MAGIC + struct.pack("<BB", VERSION, len(self.shape)))
        self._fh.write(struct.pack(f"<{len(self.shape)}I", *self.shape))

    def append(self, rows) -> None:
        rows = np.asarray(rows, dtype="<f4")
        if rows.shape[1:] != self._row:
            raise FormatError(f"slice shape {rows.shape[1:]} != {self._row}")
        if self._written + len(rows) > self.shape[0]:
            raise FormatError("more rows than declared")
        self._fh.write(np.ascontiguousarray(rows).tobytes())
        self._written += len(rows)

    def close(self) -> None:
        self._fh.close()
        if self._written != self.shape[0]:
            self._tmp.unlink()
            raise FormatError(f"wrote {self._written} of {self.shape[0]} rows")
        os.replace(self._tmp, self.path)

    def __enter__(self) -> "TensorWriter":
        return self

    def __exit__(self, exc_type, *rest) -> None:
        if exc_type is None:
            self.close()
        else:
            self._fh.close()
            self._tmp.unlink(missing_ok=True)


def write_tensor(path: str | os.PathLike, array) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        _write_record(fh, array)
    os.replace(tmp, path)


def open_tensor(path: str | os.PathLike) -> np.ndarray:
    """Memory-map a single-record file as a read-only float32 array."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise FormatError(f"{path}: bad magic")
        version, rank = struct.unpack("<BB", _read_exact(fh, 2))
        if version != VERSION:
            raise FormatError(f"unsupported NCLT version {version}")
        shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    offset = 6 + 4 * rank
    expected = offset + 4 * int(np.prod(shape, dtype=np.int64))
    if os.path.getsize(path) != expected:
        raise FormatError(f"{path}: size {os.path.getsize(path)} != expected {expected}")
    return np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=shape)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = _read_record(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after NCLT record")
    return arr


def tensor_bytes(array) -> bytes:
    buf = io.BytesIO()
    _write_record(buf, array)
    return buf.getvalue()


def write_container(path: str | os.PathLike, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["tensors"] = [name for name, _ in tensors]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, arr in tensors:
            _write_record(fh, arr)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != HEADER_MAGIC:
            raise FormatError(f"{path}: not an NCLT container")
        (length,) = struct.unpack("<I", _read_exact(fh, 4))
        header = json.loads(_read_exact(fh, length).decode("utf-8"))
        tensors = {name: _read_record(fh) for name in header["tensors"]}
    return header, tensors
