import numpy as np
import pytest

from snlblock.tensor import ConfigError
from snlblock.tensorio import read_tensor, write_tensor


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 4), (2, 2, 2, 2)])
def test_round_trip_bit_identical(tmp_path, dtype, shape):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal(shape).astype(dtype)
    path = tmp_path / "t.snlt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == dtype
    assert back.shape == shape
    assert np.array_equal(back.view(np.uint8) if False else back, arr)
    assert back.tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    arr = np.array([[1.0, 2.0]], dtype=np.float32)
    path = tmp_path / "t.snlt"
    write_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"SNLT"
    assert raw[4] == 0  # single precision
    assert raw[5] == 2  # rank
    assert int.from_bytes(raw[6:10], "little") == 1
    assert int.from_bytes(raw[10:14], "little") == 2


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.snlt"
    path.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ConfigError):
        read_tensor(path)


def test_truncated(tmp_path):
    arr = np.zeros((4, 4), dtype=np.float64)
    path = tmp_path / "t.snlt"
    write_tensor(path, arr)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ConfigError):
        read_tensor(path)


def test_unsupported_dtype(tmp_path):
    with pytest.raises(ConfigError):
        write_tensor(tmp_path / "t.snlt", np.zeros(3, dtype=np.int32))
