"""DMRI binary container.

Layout (little-endian)::

    0..3   magic b"DMRI"
    4      version (1)
    5      dtype: 1 real f32, 2 complex f32 (re, im), 3 vector field f32,
           4 mask u8
    6      rank (2 or 3)
    7      reserved (0)
    8..    rank x u64 dims
    ...    payload, row-major, last axis fastest

A vector field stores ``rank`` components per voxel, so the payload holds
``prod(dims) * rank`` floats.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DMRI"
VERSION = 1

REAL, COMPLEX, VECTOR, MASK = 1, 2, 3, 4

_KIND_NAMES = {"real": REAL, "complex": COMPLEX, "vector": VECTOR, "mask": MASK}
_STORAGE = {
    REAL: np.dtype("<f4"),
    COMPLEX: np.dtype("<c8"),
    VECTOR: np.dtype("<f4"),
    MASK: np.dtype("u1"),
}


class ContainerError(ValueError):
    """Base class for malformed DMRI files."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DtypeMismatchError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


def infer_kind(payload) -> int:
    """Guess the container dtype code for an array or mask object."""
    if hasattr(payload, "selected"):
        return MASK
    a = np.asarray(payload)
    if a.dtype == np.bool_ or a.dtype == np.uint8:
        return MASK
    if np.iscomplexobj(a):
        return COMPLEX
    # a 2D field (H, W, 2) looks like a real 3D volume; pass kind="vector"
    if a.ndim == 4 and a.shape[-1] == 3:
        return VECTOR
    return REAL


def _kind_code(kind) -> int:
    if isinstance(kind, str):
        try:
            return _KIND_NAMES[kind]
        except KeyError:
            raise DtypeMismatchError(f"unknown payload kind {kind!r}") from None
    return int(kind)


def encode(payload, kind=None) -> bytes:
    code = infer_kind(payload) if kind is None else _kind_code(kind)
    if code not in _STORAGE:
        raise DtypeMismatchError(f"unknown dtype code {code}")
    a = np.asarray(getattr(payload, "selected", payload))
    if code == VECTOR:
        dims = a.shape[:-1]
        if a.shape[-1] != len(dims):
            raise ShapeMismatchError(
                f"vector field needs {len(dims)} components per voxel, got {a.shape[-1]}"
            )
    else:
        dims = a.shape
    if len(dims) not in (2, 3):
        raise ShapeMismatchError(f"rank must be 2 or 3, got {len(dims)}")
    if code == MASK:
        if a.dtype != np.bool_ and not np.isin(a, (0, 1)).all():
            raise DtypeMismatchError("mask values must be 0 or 1")
    elif code != COMPLEX and np.iscomplexobj(a):
        raise DtypeMismatchError("complex data cannot be stored as a real payload")
    body = np.ascontiguousarray(a, dtype=_STORAGE[code]).tobytes()
    header = MAGIC + bytes([VERSION, code, len(dims), 0])
    header += struct.pack(f"<{len(dims)}Q", *dims)
    return header + body


def decode(buf: bytes, expect=None) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedError(f"header needs 8 bytes, file has {len(buf)}")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, code, rank, _ = buf[4], buf[5], buf[6], buf[7]
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if code not in _STORAGE:
        raise DtypeMismatchError(f"unknown dtype code {code}")
    if expect is not None and _kind_code(expect) != code:
        raise DtypeMismatchError(f"expected dtype {_kind_code(expect)}, file has {code}")
    if rank not in (2, 3):
        raise ShapeMismatchError(f"rank must be 2 or 3, got {rank}")
    end = 8 + 8 * rank
    if len(buf) < end:
        raise TruncatedError("file ends inside the dimension table")
    dims = struct.unpack(f"<{rank}Q", buf[8:end])
    if any(d == 0 for d in dims):
        raise ShapeMismatchError(f"zero-length dimension in {dims}")
    shape = dims + (rank,) if code == VECTOR else dims
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * _STORAGE[code].itemsize
    have = len(buf) - end
    if have < nbytes:
        raise TruncatedError(
            f"header declares {count} values ({nbytes} bytes), only {have} bytes present"
        )
    if have > nbytes:
        raise ShapeMismatchError(f"{have - nbytes} trailing bytes after payload")
    out = np.frombuffer(buf, dtype=_STORAGE[code], count=count, offset=end).reshape(shape)
    if code == MASK:
        if np.any(out > 1):
            raise DtypeMismatchError("mask payload contains values other than 0/1")
        return out.astype(bool)
    return out.copy()


def write(path, payload, kind=None) -> Path:
    path = Path(path)
    path.write_bytes(encode(payload, kind))
    return path


def read(path, expect=None) -> np.ndarray:
    return decode(Path(path).read_bytes(), expect)
