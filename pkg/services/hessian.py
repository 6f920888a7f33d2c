"""
Layer Hessian H = 2XX^T: construction, dampening, SPD inversion and the
row/column elimination that keeps H^-1 current as weights are removed.
"""
import numpy as np
from scipy.linalg import lapack

from config.settings import AUTO_DAMP_FRACTION, PIVOT_BREAKDOWN_FACTOR
from services.tensor_io import as_matrix
from utils.errors import NumericalError, UsageError


def _mirror_upper(m):
    """Copy the upper triangle onto the lower one so the result is exactly symmetric."""
    return np.triu(m) + np.triu(m, 1).T


def resolve_damp(damp, hessian):
    """
    Turn a damp setting into an absolute diagonal addition.

    Args:
        damp (str|float): "auto" or a nonnegative number
        hessian (np.ndarray): Undampened 2XX^T

    Returns:
        float: The absolute dampening value
    """
    if damp is None:
        return 0.0
    if isinstance(damp, str):
        if damp.strip().lower() == "auto":
            return AUTO_DAMP_FRACTION * float(np.mean(np.diag(hessian)))
        try:
            damp = float(damp)
        except ValueError:
            raise UsageError(f"Invalid damp value: {damp!r} (use 'auto' or a number)")
    damp = float(damp)
    if damp < 0 or not np.isfinite(damp):
        raise UsageError(f"Damp must be a nonnegative finite number, got {damp}")
    return damp


def compute_hessian(inputs, damp=0.0):
    """
    Build 2XX^T + damp*I, accumulating over one or more input batches.

    Args:
        inputs (np.ndarray|list): One d_col x N matrix or a list of them
            (e.g. augmented calibration batches)
        damp (str|float): "auto" or an absolute dampening value

    Returns:
        np.ndarray: Symmetric d_col x d_col Hessian
    """
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    if not inputs:
        raise UsageError("compute_hessian needs at least one input matrix")

    d_col = np.shape(inputs[0])[0]
    h = np.zeros((d_col, d_col))
    for x in inputs:
        x = as_matrix(x, "inputs")
        if x.shape[0] != d_col:
            raise UsageError(f"Input batches disagree on d_col: {x.shape[0]} vs {d_col}")
        h += 2.0 * (x @ x.T)
    h = _mirror_upper(h)

    h[np.diag_indices(d_col)] += resolve_damp(damp, h)
    return h


def invert_spd(h):
    """
    Invert a symmetric positive definite matrix through its Cholesky factor.

    Raises:
        NumericalError: If a Cholesky pivot fails or falls below
            PIVOT_BREAKDOWN_FACTOR * trace/d; the message names the pivot.
    """
    h = as_matrix(h, "hessian")
    d = h.shape[0]
    if h.shape[1] != d:
        raise UsageError(f"invert_spd needs a square matrix, got {h.shape}")
    scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    if not np.allclose(h, h.T, rtol=0.0, atol=1e-10 * scale):
        raise UsageError("invert_spd needs a symmetric matrix")

    factor, info = lapack.dpotrf(h, lower=False, clean=True)
    if info < 0:
        raise NumericalError(f"Cholesky factorization rejected argument {-info}")
    if info > 0:
        pivot = info - 1
        raise NumericalError(
            f"Hessian is not positive definite (pivot {pivot} failed); "
            f"increase damp or add calibration data",
            pivot=pivot,
        )

    threshold = PIVOT_BREAKDOWN_FACTOR * np.trace(h) / d
    pivots = np.diag(factor) ** 2
    bad = np.flatnonzero(pivots <= threshold)
    if bad.size:
        pivot = int(bad[0])
        raise NumericalError(
            f"Hessian is numerically singular (pivot {pivot} = {pivots[pivot]:.3e}); "
            f"increase damp or add calibration data",
            pivot=pivot,
        )

    inv, info = lapack.dpotri(factor, lower=False)
    if info != 0:
        raise NumericalError(f"Inverse from Cholesky factor failed at pivot {info - 1}", pivot=info - 1)
    return _mirror_upper(inv)


def masked_inverse(h, mask):
    """
    Inverse of h restricted to the rows/columns in mask, i.e. (H_M)^-1,
    which differs from (H^-1)_M.

    Args:
        h (np.ndarray): Symmetric matrix
        mask (iterable): Indices to keep

    Returns:
        np.ndarray: |mask| x |mask| inverse, ordered by ascending index
    """
    idx = np.unique(np.asarray(list(mask), dtype=np.int64))
    if idx.size == 0:
        raise UsageError("masked_inverse needs a nonempty mask")
    return invert_spd(h[np.ix_(idx, idx)])


def quadratic_loss(w, w_hat, h):
    """(w - w_hat)^T H (w - w_hat), the unit in which ledgers record loss."""
    delta = np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64)
    return float(delta @ h @ delta)


class InverseHessianState:
    """
    Working copy of H^-1 for one row, plus the mask of indices still active.

    Eliminated indices keep their (stale) diagonal entry while the rest of
    their row and column is zero, so the matrix never has to be resized.
    """

    def __init__(self, inv, active=None, threshold=None):
        self.inv = inv
        d_col = inv.shape[0]
        self.active = np.ones(d_col, dtype=bool) if active is None else active
        if threshold is None:
            threshold = PIVOT_BREAKDOWN_FACTOR * float(np.trace(inv)) / max(d_col, 1)
        self.threshold = threshold

    @classmethod
    def from_hessian(cls, h):
        return cls(invert_spd(h))

    @property
    def size(self):
        return self.inv.shape[0]

    def copy(self):
        return InverseHessianState(self.inv.copy(), self.active.copy(), self.threshold)

    def active_indices(self):
        return np.flatnonzero(self.active)

    def active_submatrix(self):
        idx = self.active_indices()
        return self.inv[np.ix_(idx, idx)]

    def eliminate(self, p):
        """
        Remove index p: Gaussian elimination of row/column p in H^-1.

        On the remaining active set the result is the inverse of H with
        row and column p deleted.
        """
        p = int(p)
        if not self.active[p]:
            raise UsageError(f"Index {p} was already eliminated")
        pivot = self.inv[p, p]
        if not pivot > self.threshold:
            raise NumericalError(
                f"Numerical breakdown eliminating index {p}: pivot {pivot:.3e} "
                f"<= threshold {self.threshold:.3e}",
                pivot=p,
            )
        col = self.inv[:, p].copy()
        update = np.outer(col, col)
        update /= pivot
        self.inv -= update
        self.inv[p, :] = 0.0
        self.inv[:, p] = 0.0
        self.inv[p, p] = pivot
        self.active[p] = False

    def eliminate_many(self, indices):
        for p in indices:
            self.eliminate(p)
