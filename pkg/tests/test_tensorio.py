import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from cdinet.tensorio import TensorFormatError, decode_tensor, encode_tensor, read_tensor, write_tensor


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_float64_round_trip_is_bit_exact(a):
    b = decode_tensor(encode_tensor(a))
    assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_header_layout():
    buf = encode_tensor(np.arange(6.0).reshape(2, 3), bits=32)
    assert buf[:4] == b"CDIT"
    assert struct.unpack_from("<BB2IB", buf, 4) == (1, 2, 2, 3, 4)
    assert np.frombuffer(buf[15:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_float32_storage(tmp_path):
    a = np.array([[0.1, 1e-3], [2.5, -7.0]])
    write_tensor(tmp_path / "t.cdit", a, bits=32)
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.cdit"), a.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("buf", [b"XXXX\x01\x00\x08", b"CDIT\x02\x00\x08", b"CDIT\x01\x01\x02\x00\x00\x00\x08",
                                 b"CDIT\x01\x00\x03" + bytes(8), b"CDIT\x01"])
def test_malformed_buffers_rejected(buf):
    with pytest.raises(TensorFormatError):
        decode_tensor(buf)
