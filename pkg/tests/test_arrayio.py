import numpy as np
import pytest

from flowconvert.arrayio import load_arrays, save_arrays
from flowconvert.errors import ContractError


def test_roundtrip(tmp_path):
    arrays = {
        "mel": np.arange(12, dtype=np.float64).reshape(3, 4),
        "phonemes": np.array([1, 5, 2], dtype=np.int64),
    }
    meta = {"utterance_id": "u1", "text": ["w1", "w2"]}
    path = tmp_path / "u1.fca"
    save_arrays(path, arrays, meta)
    loaded, loaded_meta = load_arrays(path)
    assert loaded_meta == meta
    assert set(loaded) == {"mel", "phonemes"}
    np.testing.assert_array_equal(loaded["mel"], arrays["mel"])
    np.testing.assert_array_equal(loaded["phonemes"], arrays["phonemes"])
    assert loaded["mel"].dtype == np.float64
    assert loaded["phonemes"].dtype == np.int64


def test_identical_content_identical_bytes(tmp_path):
    arrays = {"a": np.linspace(0, 1, 7), "b": np.ones((2, 2), dtype=np.int32)}
    save_arrays(tmp_path / "x1.fca", arrays, {"k": 1})
    save_arrays(tmp_path / "x2.fca", arrays, {"k": 1})
    assert (tmp_path / "x1.fca").read_bytes() == (tmp_path / "x2.fca").read_bytes()


def test_rejects_garbage(tmp_path):
    path = tmp_path / "bad.fca"
    path.write_bytes(b"not a container at all")
    with pytest.raises(ContractError):
        load_arrays(path)


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ContractError):
        save_arrays(tmp_path / "c.fca", {"c": np.array([1 + 2j])})


def test_scalar_and_empty_arrays(tmp_path):
    arrays = {"scalar": np.array(3.5), "empty": np.zeros((0, 4))}
    save_arrays(tmp_path / "s.fca", arrays)
    loaded, _ = load_arrays(tmp_path / "s.fca")
    assert loaded["scalar"].shape == ()
    assert float(loaded["scalar"]) == 3.5
    assert loaded["empty"].shape == (0, 4)
