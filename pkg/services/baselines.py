"""
Comparison methods for layer-wise squared error: magnitude pruning with
and without least-squares reconstruction, and round-to-nearest quantization.
"""
import numpy as np
import scipy.linalg

from services.hessian import compute_hessian
from services.quant_solver import fit_grid, quantize_value
from services.sparse_solver import SparsityTarget
from utils.errors import NumericalError, UsageError


def _global_magnitude_mask(weights, k, keep=None):
    """Boolean mask of the k smallest |w| (ties: lowest flat index); `keep` entries stay masked."""
    flat = np.abs(weights).ravel()
    mask = np.zeros(flat.size, dtype=bool)
    if keep is not None:
        mask |= keep.ravel()
    need = k - int(mask.sum())
    if need > 0:
        candidates = np.flatnonzero(~mask)
        chosen = candidates[np.argsort(flat[candidates], kind='stable')[:need]]
        mask[chosen] = True
    return mask.reshape(weights.shape)


def reconstruct_row(w, h, mask):
    """
    Zero w on mask and refit the rest: argmin over v (v_mask = 0) of (w - v)^T H (w - v).
    """
    w = np.asarray(w, dtype=np.float64)
    pruned = np.flatnonzero(mask)
    support = np.flatnonzero(~np.asarray(mask, dtype=bool))
    result = np.zeros_like(w)
    if support.size == 0:
        return result
    result[support] = w[support]
    if pruned.size == 0:
        return result
    try:
        result[support] += scipy.linalg.solve(h[np.ix_(support, support)],
                                              h[np.ix_(support, pruned)] @ w[pruned], assume_a='pos')
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Support Hessian is singular: {e}")
    return result


def magnitude_prune(weights, sparsity):
    """Global magnitude pruning without any update of the remaining weights."""
    weights = np.asarray(weights, dtype=np.float64)
    k = SparsityTarget.unstructured(sparsity).pruned_count(weights.size)
    mask = _global_magnitude_mask(weights, k)
    return np.where(mask, 0.0, weights)


def magnitude_reconstruct(problem, sparsity, damp=0.0):
    """Global magnitude mask, then per-row least-squares reconstruction of the survivors."""
    h = compute_hessian(problem.inputs, damp)
    k = SparsityTarget.unstructured(sparsity).pruned_count(problem.weights.size)
    mask = _global_magnitude_mask(problem.weights, k)
    return np.vstack([reconstruct_row(w, h, m) for w, m in zip(problem.weights, mask)])


def nm_magnitude_reconstruct(problem, n, m, damp=0.0):
    """Keep the n largest |w| of every block of m, then reconstruct each row."""
    SparsityTarget.nm(n, m).check_columns(problem.d_col)
    h = compute_hessian(problem.inputs, damp)
    blocks = np.abs(problem.weights).reshape(problem.d_row, -1, m)
    # Stable sort on |w| ascending: the m - n smallest (lowest index first on ties) are pruned
    order = np.argsort(blocks, axis=2, kind='stable')[:, :, :m - n]
    mask = np.zeros(blocks.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=2)
    mask = mask.reshape(problem.weights.shape)
    return np.vstack([reconstruct_row(w, h, mk) for w, mk in zip(problem.weights, mask)])


def iterative_magnitude_reconstruct(problem, sparsity, steps, damp=0.0):
    """
    Reach the target in `steps` rounds, each pruning the same fraction of the
    remaining weights by magnitude and then fully reoptimizing every row.
    """
    if steps < 1:
        raise UsageError(f"Step count must be positive, got {steps}")
    h = compute_hessian(problem.inputs, damp)
    total = problem.weights.size
    current = problem.weights.copy()
    mask = np.zeros(problem.weights.shape, dtype=bool)
    for r in range(1, steps + 1):
        level = 1.0 - (1.0 - sparsity) ** (r / steps)
        k = SparsityTarget.unstructured(min(level, sparsity)).pruned_count(total)
        mask = _global_magnitude_mask(current, k, keep=mask)
        current = np.vstack([reconstruct_row(w, h, mk) for w, mk in zip(problem.weights, mask)])
    return current


def nearest_round(weights, bits, symmetric=False):
    """
    Round every row to its own fitted grid, no compensation.

    Returns:
        tuple: (quantized matrix, list of grids)
    """
    weights = np.asarray(weights, dtype=np.float64)
    grids = [fit_grid(row, bits, symmetric) for row in weights]
    rounded = np.vstack([quantize_value(row, g) for row, g in zip(weights, grids)])
    return rounded, grids
