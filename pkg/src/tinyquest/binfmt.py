"""Little-endian container shared by the QCAL and QCKP files.

Layout: 4-byte magic, u16 version, u32-length JSON header, u32 record count,
then records of (u16 name length, utf-8 name, u8 dtype code, u8 ndim,
u32 dims..., raw little-endian payload).
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    """A binary artifact is malformed, truncated, or from another format version."""


class VersionError(FormatError):
    def __init__(self, found: int, supported: int):
        super().__init__(f"unsupported format version {found} (this build reads version {supported})")
        self.found = found
        self.supported = supported


def _code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"cannot serialize dtype {arr.dtype}")
    return _CODES[dt]


def write_container(path, magic: bytes, version: int, header: dict, records: list[tuple[str, np.ndarray]]) -> None:
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<H", version))
    meta = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        code = _code(arr)
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    found = r.take(len(magic))
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    (ver,) = r.unpack("<H")
    if ver != version:
        raise VersionError(ver, version)
    (n_meta,) = r.unpack("<I")
    try:
        header = json.loads(r.take(n_meta))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    (count,) = r.unpack("<I")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: record {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        records[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return header, records
