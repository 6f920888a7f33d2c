import numpy as np
import pytest

from services.tensor_io import (
    LayerProblem, as_matrix, load_json, load_layer_problem, load_matrix, save_json, save_matrix,
)
from utils.errors import TensorFormatError, UsageError


def test_identity_round_trip(tmp_path):
    path = tmp_path / "eye.npy"
    save_matrix(np.eye(2), str(path))
    assert np.array_equal(load_matrix(str(path)), [[1.0, 0.0], [0.0, 1.0]])


def test_random_matrix_is_bit_exact(tmp_path, rng):
    m = rng.standard_normal((3, 5))
    path = tmp_path / "m.npy"
    save_matrix(m, str(path))
    loaded = load_matrix(str(path))
    assert loaded.dtype == np.float64
    assert np.array_equal(loaded, m)


def test_single_zero(tmp_path):
    path = tmp_path / "z.npy"
    save_matrix([[0.0]], str(path))
    assert np.array_equal(load_matrix(str(path)), [[0.0]])


def test_numpy_written_float32_is_widened(tmp_path, rng):
    m = rng.standard_normal((4, 3)).astype(np.float32)
    path = tmp_path / "f32.npy"
    np.save(path, m)
    loaded = load_matrix(str(path))
    assert loaded.dtype == np.float64
    assert np.array_equal(loaded, m.astype(np.float64))


@pytest.mark.parametrize("array", [
    np.arange(6, dtype=np.int32).reshape(2, 3),
    np.ones((2, 2), dtype='>f8'),
])
def test_unsupported_dtype(tmp_path, array):
    path = tmp_path / "bad.npy"
    np.save(path, array)
    with pytest.raises(TensorFormatError, match="unsupported dtype"):
        load_matrix(str(path))


def test_rejects_non_2d(tmp_path):
    path = tmp_path / "vec.npy"
    np.save(path, np.ones(4))
    with pytest.raises(TensorFormatError, match="2-D"):
        load_matrix(str(path))


def test_rejects_fortran_order(tmp_path, rng):
    path = tmp_path / "f.npy"
    np.save(path, np.asfortranarray(rng.standard_normal((3, 4))))
    with pytest.raises(TensorFormatError, match="Fortran"):
        load_matrix(str(path))


def test_rejects_truncated_payload(tmp_path, rng):
    path = tmp_path / "t.npy"
    save_matrix(rng.standard_normal((4, 4)), str(path))
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(TensorFormatError, match="truncated"):
        load_matrix(str(path))


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.npy"
    path.write_bytes(b"garbage")
    with pytest.raises(TensorFormatError, match="malformed header"):
        load_matrix(str(path))


def test_rejects_non_finite(tmp_path):
    path = tmp_path / "nan.npy"
    np.save(path, np.array([[1.0, np.nan]]))
    with pytest.raises(TensorFormatError, match="NaN"):
        load_matrix(str(path))


def test_save_into_unwritable_location(tmp_path):
    blocker = tmp_path / "afile"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_matrix(np.eye(2), str(blocker / "m.npy"))


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_matrix(str(tmp_path / "absent.npy"))


def test_as_matrix_rejects_3d():
    with pytest.raises(TensorFormatError):
        as_matrix(np.zeros((2, 2, 2)))


def test_layer_problem_checks_shapes(rng):
    with pytest.raises(UsageError, match="columns"):
        LayerProblem(rng.standard_normal((2, 3)), rng.standard_normal((4, 5)))


def test_load_layer_problem_joins_batches(tmp_path, rng):
    w = rng.standard_normal((2, 3))
    x1, x2 = rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
    save_matrix(w, str(tmp_path / "fc.npy"))
    save_matrix(x1, str(tmp_path / "x1.npy"))
    save_matrix(x2, str(tmp_path / "x2.npy"))
    problem = load_layer_problem(str(tmp_path / "fc.npy"), [str(tmp_path / "x1.npy"), str(tmp_path / "x2.npy")])
    assert problem.name == "fc"
    assert problem.inputs.shape == (3, 9)
    assert np.array_equal(problem.inputs, np.hstack([x1, x2]))


def test_json_helpers(tmp_path):
    path = tmp_path / "sub" / "data.json"
    save_json({"a": [1, 2]}, str(path))
    assert load_json(str(path)) == {"a": [1, 2]}
    assert path.read_text().endswith("\n")

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(TensorFormatError, match="invalid JSON"):
        load_json(str(bad))
