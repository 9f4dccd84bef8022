import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deltamri import container
from deltamri.container import (
    BadMagicError, DtypeMismatchError, ShapeMismatchError, TruncatedError, VersionError,
    decode, encode,
)

dims = st.one_of(st.tuples(st.integers(1, 5), st.integers(1, 5)),
                 st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)))


def test_header_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = encode(a)
    assert buf[:4] == b"DMRI"
    assert tuple(buf[4:8]) == (1, 1, 2, 0)
    assert struct.unpack("<2Q", buf[8:24]) == (2, 3)
    assert np.frombuffer(buf[24:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_complex_and_vector_layout():
    z = np.array([[1 + 2j, 3 - 4j]])
    assert np.frombuffer(encode(z)[24:], "<f4").tolist() == [1, 2, 3, -4]
    v = np.zeros((2, 2, 2))
    v[0, 1] = [5, 6]
    buf = encode(v, "vector")
    assert buf[5] == container.VECTOR and buf[6] == 2
    assert np.frombuffer(buf[24:], "<f4")[2:4].tolist() == [5, 6]


@given(dims, st.sampled_from(["real", "complex", "vector", "mask"]), st.integers(0, 2**31))
def test_round_trip(shape, kind, seed):
    rng = np.random.default_rng(seed)
    if kind == "real":
        a = rng.normal(size=shape).astype(np.float32)
    elif kind == "complex":
        a = (rng.normal(size=shape) + 1j * rng.normal(size=shape)).astype(np.complex64)
    elif kind == "vector":
        a = rng.normal(size=shape + (len(shape),)).astype(np.float32)
    else:
        a = rng.random(shape) > 0.5
    back = decode(encode(a, kind), expect=kind)
    assert back.dtype == a.dtype
    np.testing.assert_array_equal(back, a)


def test_file_round_trip(tmp_path):
    a = np.linspace(0, 1, 24).reshape(2, 3, 4)
    container.write(tmp_path / "a.dmri", a)
    np.testing.assert_allclose(container.read(tmp_path / "a.dmri"), a, rtol=1e-7)


def test_errors_are_distinct():
    good = encode(np.ones((2, 2), np.float32))
    with pytest.raises(BadMagicError):
        decode(b"XMRI" + good[4:])
    with pytest.raises(VersionError):
        decode(good[:4] + bytes([2]) + good[5:])
    with pytest.raises(TruncatedError):
        decode(good[:-1])
    with pytest.raises(TruncatedError):
        decode(good[:12])
    with pytest.raises(TruncatedError):
        decode(good[:5])
    with pytest.raises(ShapeMismatchError):
        decode(good + b"\0")
    with pytest.raises(DtypeMismatchError):
        decode(good, expect="complex")
    with pytest.raises(DtypeMismatchError):
        encode(np.ones((2, 2)) * 1j, "real")
    with pytest.raises(ShapeMismatchError):
        encode(np.ones((2, 2, 3)), "vector")
    with pytest.raises(ShapeMismatchError):
        encode(np.ones(4))


def test_mask_payload_validated():
    buf = bytearray(encode(np.ones((2, 2), bool)))
    buf[-1] = 7
    with pytest.raises(DtypeMismatchError):
        decode(bytes(buf))


def test_float64_input_is_narrowed():
    a = np.array([[0.1, 0.2]])
    back = decode(encode(a))
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, a.astype(np.float32))
