"""
Optimal Brain Quantizer: per-row uniform grids and the greedy
quantize-then-compensate solver built on the same H^-1 elimination as
the pruner.
"""
from dataclasses import dataclass
from typing import List

import numpy as np
import scipy.linalg

from config.settings import GRID_CANDIDATES, GRID_MIN_RATIO, SUPPORTED_BITS
from services.hessian import InverseHessianState, compute_hessian
from services.sparse_solver import LossLedger
from services.tensor_io import as_matrix
from utils.errors import NumericalError, UsageError
from utils.parallel import run_parallel


@dataclass(frozen=True)
class QuantGrid:
    """
    Uniform grid: values scale * (q - zero_point) for integer q in
    [0, 2^bits - 1] (asymmetric) or [-2^(bits-1), 2^(bits-1) - 1] (symmetric).
    """
    scale: float
    zero_point: int
    bits: int
    symmetric: bool = False

    def __post_init__(self):
        if not self.scale > 0:
            raise UsageError(f"Grid scale must be positive, got {self.scale}")
        if self.bits not in SUPPORTED_BITS:
            raise UsageError(f"Unsupported bit-width: {self.bits}")
        if self.symmetric and self.zero_point != 0:
            raise UsageError("Symmetric grids have zero_point 0")

    @property
    def levels(self):
        """Inclusive (lowest, highest) integer code."""
        if self.symmetric:
            return -2 ** (self.bits - 1), 2 ** (self.bits - 1) - 1
        return 0, 2 ** self.bits - 1

    def to_dict(self):
        return {"scale": self.scale, "zero_point": self.zero_point}


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_value(w, g):
    """
    Nearest grid value of w (scalar or array), rounding halves away from zero
    and clamping to the grid range.
    """
    lo, hi = g.levels
    codes = np.clip(round_half_away(np.asarray(w, dtype=np.float64) / g.scale) + g.zero_point, lo, hi)
    result = g.scale * (codes - g.zero_point)
    return float(result) if np.ndim(result) == 0 else result


def _candidate_grids(w, bits, symmetric):
    ratios = GRID_MIN_RATIO + (1.0 - GRID_MIN_RATIO) * np.arange(GRID_CANDIDATES) / (GRID_CANDIDATES - 1)
    grids = []
    # Descending ratio, so the first of equal-error grids has the larger scale
    for r in ratios[::-1]:
        if symmetric:
            top = r * float(np.max(np.abs(w)))
            steps = 2 ** (bits - 1) - 1 if bits > 1 else 1
            grids.append(QuantGrid(top / steps, 0, bits, True))
        else:
            lo = r * min(float(np.min(w)), 0.0)
            hi = r * max(float(np.max(w)), 0.0)
            scale = (hi - lo) / (2 ** bits - 1)
            zero = int(np.clip(round_half_away(-lo / scale), 0, 2 ** bits - 1))
            grids.append(QuantGrid(scale, zero, bits, False))
    return grids


def fit_grid(w, bits, symmetric=False):
    """
    Pick the per-row grid minimizing squared rounding error over clipping
    ratios r in [0.5, 1] applied to max|w| (symmetric) or to (min w, max w).

    Args:
        w (np.ndarray): Row vector
        bits (int): Bit-width
        symmetric (bool): Symmetric grid (zero_point 0)

    Returns:
        QuantGrid: Best grid; ties go to the larger scale. An all-zero row
        gets the degenerate grid with scale 1.
    """
    w = np.asarray(w, dtype=np.float64)
    if bits not in SUPPORTED_BITS:
        raise UsageError(f"Unsupported bit-width: {bits}")
    if not np.any(w):
        return QuantGrid(1.0, 0, bits, symmetric)

    best, best_err = None, np.inf
    for grid in _candidate_grids(w, bits, symmetric):
        err = float(np.sum((quantize_value(w, grid) - w) ** 2))
        if err < best_err:
            best, best_err = grid, err
    return best


def fit_tensor_grid(m, bits, symmetric=False):
    """Single grid for a whole tensor (e.g. one batch of layer inputs)."""
    return fit_grid(as_matrix(m, "tensor").ravel(), bits, symmetric)


def grids_to_json(grids):
    if not grids:
        return {"rows": {}, "bits": None, "symmetric": None}
    return {
        "rows": {str(i): g.to_dict() for i, g in enumerate(grids)},
        "bits": grids[0].bits,
        "symmetric": grids[0].symmetric,
    }


def grids_from_json(data):
    bits, symmetric = int(data["bits"]), bool(data["symmetric"])
    rows = data["rows"]
    return [QuantGrid(float(rows[str(i)]["scale"]), int(rows[str(i)]["zero_point"]), bits, symmetric)
            for i in range(len(rows))]


def obq_quantize_row(w, inv_state, g, outliers=True, freeze_zeros=False):
    """
    Quantize every active weight of one row with OBQ.

    Each step quantizes the weight with the smallest (q(w_p) - w_p)^2 / [H^-1]_pp,
    compensates the remaining weights and eliminates p from H^-1. With the
    outlier rule on, any weight whose rounding error exceeds scale/2 is
    quantized first (largest error first).

    Args:
        w (np.ndarray): Row vector
        inv_state (InverseHessianState): Fresh state; mutated in place
        g (QuantGrid): Row grid
        outliers (bool): Apply the outlier rule
        freeze_zeros (bool): Treat zero entries as pruned: eliminate them
            up front, never quantize or update them

    Returns:
        tuple: (quantized row, LossLedger)
    """
    w = np.array(w, dtype=np.float64)
    inv = inv_state.inv
    if freeze_zeros:
        frozen = np.flatnonzero((w == 0) & inv_state.active)
        inv_state.eliminate_many(frozen)
        w[frozen] = 0.0
    order, deltas = [], []
    half_step = g.scale / 2

    for _ in range(int(inv_state.active.sum())):
        candidates = inv_state.active_indices()
        q = quantize_value(w[candidates], g)
        err = q - w[candidates]

        j = None
        if outliers:
            abs_err = np.abs(err)
            if np.any(abs_err > half_step):
                j = int(np.argmax(np.where(abs_err > half_step, abs_err, -1.0)))
        scores = err ** 2 / inv[candidates, candidates]
        if j is None:
            j = int(np.argmin(scores))
        p = int(candidates[j])
        qp = q[j]

        w -= inv[:, p] * ((w[p] - qp) / inv[p, p])
        w[p] = qp
        inv_state.eliminate(p)

        order.append(p)
        deltas.append(float(scores[j]))
    return w, LossLedger(order, deltas)


@dataclass
class QuantResult:
    weights: np.ndarray
    ledgers: List[LossLedger]
    grids: List[QuantGrid]
    hessian: np.ndarray

    def ledger_loss(self):
        return sum(l.total() for l in self.ledgers)


def quantize_layer(problem, bits, symmetric=False, damp=0.0, threads=1, outliers=True,
                   freeze_zeros=False, silent=True, debug=False):
    """
    Per-channel OBQ of a whole layer: one fitted grid and one fresh H^-1
    copy per row, no global step.

    Args:
        problem (LayerProblem): Weights and calibration inputs
        bits (int): Bit-width
        symmetric (bool): Symmetric grids
        damp (str|float): Hessian dampening
        threads (int): Row worker count
        outliers (bool): Outlier rule
        freeze_zeros (bool): Keep the zeros of an already pruned matrix fixed
        silent (bool): Suppress progress output
        debug (bool): Print diagnostics

    Returns:
        QuantResult
    """
    h = compute_hessian(problem.inputs, damp)
    template = InverseHessianState.from_hessian(h)

    def solve_row(i):
        row = problem.weights[i]
        fit_on = row[row != 0] if freeze_zeros else row
        grid = fit_grid(fit_on, bits, symmetric)
        q_row, ledger = obq_quantize_row(row, template.copy(), grid, outliers, freeze_zeros)
        return q_row, ledger, grid

    if debug:
        print(f"DEBUG: {problem.name}: {bits}-bit {'symmetric' if symmetric else 'asymmetric'} OBQ")
    results = run_parallel(solve_row, range(problem.d_row), threads,
                           desc=f"Quantizing {problem.name}", silent=silent)
    weights = np.vstack([r[0] for r in results])
    return QuantResult(weights, [r[1] for r in results], [r[2] for r in results], h)


def accumulate_cross(inputs, targets):
    """
    Accumulate X Y^T over batches.

    Args:
        inputs (list): d_col x N_b input batches
        targets (list): d_row x N_b target batches (dense layer outputs)

    Returns:
        np.ndarray: d_col x d_row
    """
    if isinstance(inputs, np.ndarray):
        inputs, targets = [inputs], [targets]
    if len(inputs) != len(targets) or not inputs:
        raise UsageError("accumulate_cross needs matching, nonempty batch lists")
    total = None
    for x, y in zip(inputs, targets):
        x, y = as_matrix(x, "inputs"), as_matrix(y, "targets")
        if x.shape[1] != y.shape[1]:
            raise UsageError(f"Batch sample counts differ: {x.shape[1]} vs {y.shape[1]}")
        term = x @ y.T
        total = term if total is None else total + term
    return total


def sequential_reopt(inputs_compressed, targets, damp=0.0):
    """
    Least-squares weights for compressed-model inputs: W^T = (XX^T)^-1 X Y^T.

    Re-establishes a zero-gradient starting point so OBQ can run on inputs
    produced by already compressed layers.

    Args:
        inputs_compressed (np.ndarray|list): X (d_col x N), or batches
        targets (np.ndarray|list): Y (d_row x N), the dense layer's outputs
        damp (str|float): Dampening added to 2XX^T before solving

    Returns:
        np.ndarray: d_row x d_col weights
    """
    h = compute_hessian(inputs_compressed, damp)
    cross = accumulate_cross(inputs_compressed, targets)
    try:
        factor = scipy.linalg.cho_factor(h)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Input Gram matrix is not positive definite: {e}")
    # h = 2XX^T + damp, so the normal equations carry the same factor 2
    return scipy.linalg.cho_solve(factor, 2.0 * cross).T
