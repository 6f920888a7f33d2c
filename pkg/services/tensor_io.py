import os
import json
from dataclasses import dataclass

import numpy as np
from numpy.lib import format as npy_format

from utils.errors import TensorFormatError, UsageError

@dataclass(frozen=True)
class LayerProblem:
    """
    One layer-wise compression problem: weights W (d_row x d_col) and
    calibration inputs X (d_col x N).
    """
    weights: np.ndarray
    inputs: np.ndarray
    name: str = "layer"

    def __post_init__(self):
        weights = as_matrix(self.weights, "weights")
        inputs = as_matrix(self.inputs, "inputs")
        if weights.shape[1] != inputs.shape[0]:
            raise UsageError(
                f"Layer '{self.name}': weights have {weights.shape[1]} columns "
                f"but inputs have {inputs.shape[0]} rows"
            )
        if inputs.shape[1] < 1:
            raise UsageError(f"Layer '{self.name}': inputs need at least one sample")
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'inputs', inputs)

    @property
    def d_row(self):
        return self.weights.shape[0]

    @property
    def d_col(self):
        return self.weights.shape[1]


def as_matrix(data, what="matrix"):
    """
    Coerce array-like data into a finite, C-ordered 2-D float64 array.

    Raises:
        TensorFormatError: If the data is not 2-D or holds NaN/Inf
    """
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if m.ndim != 2:
        raise TensorFormatError(f"{what} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise TensorFormatError(f"{what} contains NaN or Inf elements")
    return m


def load_matrix(path):
    """
    Load a 2-D float matrix from an NPY v1.0/v2.0 file.

    Args:
        path (str): Path to the .npy file

    Returns:
        np.ndarray: float64 matrix (32-bit inputs are widened)

    Raises:
        TensorFormatError: Malformed header, non-2-D shape, unsupported dtype,
            Fortran order or non-finite elements
    """
    with open(path, 'rb') as f:
        try:
            version = npy_format.read_magic(f)
        except ValueError as e:
            raise TensorFormatError(f"{path}: malformed header ({e})")
        if version not in ((1, 0), (2, 0)):
            raise TensorFormatError(f"{path}: unsupported NPY version {version}")
        try:
            if version == (1, 0):
                shape, fortran_order, dtype = npy_format.read_array_header_1_0(f)
            else:
                shape, fortran_order, dtype = npy_format.read_array_header_2_0(f)
        except ValueError as e:
            raise TensorFormatError(f"{path}: malformed header ({e})")

        if dtype.kind != 'f' or dtype.itemsize not in (4, 8) or dtype.byteorder == '>':
            raise TensorFormatError(f"{path}: unsupported dtype {dtype}")
        if len(shape) != 2:
            raise TensorFormatError(f"{path}: expected a 2-D array, got shape {shape}")
        if fortran_order:
            raise TensorFormatError(f"{path}: Fortran-ordered arrays are not supported")

        count = int(np.prod(shape))
        data = np.fromfile(f, dtype=dtype, count=count)
        if data.size != count:
            raise TensorFormatError(f"{path}: truncated payload ({data.size} of {count} elements)")

    return as_matrix(data.reshape(shape), path)


def save_matrix(m, path):
    """
    Write a matrix as NPY v1.0, little-endian float64, C order.

    Args:
        m (array-like): 2-D matrix
        path (str): Destination file
    """
    m = np.ascontiguousarray(np.asarray(m, dtype='<f8'))
    if m.ndim != 2:
        raise TensorFormatError(f"Cannot save array of shape {m.shape} as a matrix")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        npy_format.write_array(f, m, version=(1, 0), allow_pickle=False)


def load_inputs(paths):
    """Load one or more calibration input files (d_col x N each)."""
    if isinstance(paths, str):
        paths = [paths]
    return [load_matrix(p) for p in paths]


def load_layer_problem(weights_path, inputs_path, name=None):
    """
    Build a LayerProblem from a weights file and one or more inputs files;
    several input batches are joined along the sample axis.
    """
    batches = load_inputs(inputs_path)
    return LayerProblem(
        weights=load_matrix(weights_path),
        inputs=batches[0] if len(batches) == 1 else np.hstack(batches),
        name=name or os.path.splitext(os.path.basename(weights_path))[0],
    )


def load_json(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"{path}: invalid JSON ({e})")


def save_json(data, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, sort_keys=False)
        f.write('\n')
