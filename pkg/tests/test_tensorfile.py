import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qe.errors import InvalidInputError
from qe.tensorfile import (MAGIC, TensorFileError, read_tensor, read_tensor_header,
                           write_tensor)


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int8, np.int32])
def test_round_trip_bit_exact(tmp_path, dtype):
    rng = np.random.default_rng(0)
    if np.issubdtype(dtype, np.floating):
        arr = rng.normal(size=(5, 7)).astype(dtype)
    else:
        arr = rng.integers(-100, 100, size=(5, 7)).astype(dtype)
    path = tmp_path / "t.qet"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == np.dtype(dtype)
    assert back.tobytes() == arr.tobytes()
    assert back.shape == arr.shape


def test_one_dimensional_round_trip(tmp_path):
    arr = np.array([1.5, -2.25, 0.0])
    write_tensor(tmp_path / "v.qet", arr)
    assert np.array_equal(read_tensor(tmp_path / "v.qet"), arr)


def test_header_only_read(tmp_path):
    arr = np.zeros((3, 4), dtype=np.float32)
    write_tensor(tmp_path / "h.qet", arr)
    dtype, dims = read_tensor_header(tmp_path / "h.qet")
    assert dtype == np.dtype("<f4")
    assert dims == (3, 4)


def test_deterministic_bytes(tmp_path):
    arr = np.random.default_rng(1).normal(size=(4, 4))
    write_tensor(tmp_path / "a.qet", arr)
    write_tensor(tmp_path / "b.qet", arr)
    assert (tmp_path / "a.qet").read_bytes() == (tmp_path / "b.qet").read_bytes()


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(allow_nan=False, width=64)))
@settings(max_examples=30)
def test_round_trip_property(arr):
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/p.qet"
        write_tensor(path, arr)
        assert read_tensor(path).tobytes() == np.ascontiguousarray(arr).tobytes()


class TestErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(TensorFileError) as exc:
            read_tensor(tmp_path / "nope.qet")
        assert exc.value.offset == 0

    def test_bad_magic_offset(self, tmp_path):
        path = tmp_path / "bad.qet"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(TensorFileError) as exc:
            read_tensor(path)
        assert exc.value.offset == 0
        assert "magic" in str(exc.value)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "trunc.qet"
        write_tensor(path, np.ones((2, 2)))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(TensorFileError) as exc:
            read_tensor(path)
        assert exc.value.offset > 0
        assert "payload" in str(exc.value)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "dtype.qet"
        payload = MAGIC + struct.pack("<I", 1) + struct.pack("<I", 99) \
            + struct.pack("<I", 1) + struct.pack("<Q", 0)
        path.write_bytes(payload)
        with pytest.raises(TensorFileError) as exc:
            read_tensor(path)
        assert exc.value.offset == 8

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "extra.qet"
        write_tensor(path, np.ones(3))
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(TensorFileError):
            read_tensor(path)

    def test_unsupported_write_dtype(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_tensor(tmp_path / "c.qet", np.ones(3, dtype=np.complex128))
