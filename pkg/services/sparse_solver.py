"""
Exact greedy OBS pruning.

Every row of W is pruned to full depth on its own copy of H^-1 (rows share
no Hessian terms), recording the pruning order and the loss increase of
each step. A global mask is then chosen from those ledgers and the final
weights are materialized either from the stored row snapshots ("trace")
or by one group-OBS solve per row ("recompute").
"""
import heapq
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg

from config.settings import SNAPSHOT_CAP_MB
from services.hessian import InverseHessianState, compute_hessian, masked_inverse
from services.tensor_io import LayerProblem
from utils.errors import NumericalError, UsageError
from utils.parallel import run_parallel

MODES = ('trace', 'recompute')


@dataclass
class LossLedger:
    """
    Pruning (or quantization) order of one row with the loss increase of
    every step, in units of (w - w_hat)^T H (w - w_hat).

    With block_size > 1 the order holds block indices.
    """
    order: List[int] = field(default_factory=list)
    deltas: List[float] = field(default_factory=list)
    block_size: int = 1

    def __len__(self):
        return len(self.order)

    def total(self, count=None):
        return float(sum(self.deltas[:count] if count is not None else self.deltas))

    def pruned_indices(self, count=None):
        """Weight indices removed by the first `count` steps."""
        steps = self.order[:count] if count is not None else self.order
        if self.block_size == 1:
            return list(steps)
        c = self.block_size
        return [b * c + j for b in steps for j in range(c)]

    def truncated(self, count):
        return LossLedger(list(self.order[:count]), list(self.deltas[:count]), self.block_size)

    def to_dict(self):
        data = {"indices": [int(i) for i in self.order], "deltas": [float(d) for d in self.deltas]}
        if self.block_size != 1:
            data["block_size"] = self.block_size
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(list(data["indices"]), list(data["deltas"]), int(data.get("block_size", 1)))


@dataclass
class RowTrace(LossLedger):
    """A ledger plus, optionally, the full row after every step."""
    snapshots: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SparsityTarget:
    """
    What to prune: unstructured (fraction or count), N:M, or block sparsity.
    """
    kind: str
    sparsity: float = 0.0
    count: Optional[int] = None
    n: Optional[int] = None
    m: Optional[int] = None
    block_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ('unstructured', 'nm', 'block'):
            raise UsageError(f"Unknown sparsity kind: {self.kind}")
        if not 0.0 <= self.sparsity < 1.0:
            raise UsageError(f"Sparsity must be in [0, 1), got {self.sparsity}")
        if self.count is not None and self.count < 0:
            raise UsageError(f"Pruned weight count must be nonnegative, got {self.count}")
        if self.kind == 'nm':
            if self.n is None or self.m is None or not 0 < self.n < self.m:
                raise UsageError(f"N:M sparsity needs 0 < N < M, got {self.n}:{self.m}")
        if self.kind == 'block':
            if self.block_size is None or self.block_size < 1:
                raise UsageError(f"Block sparsity needs a positive block size, got {self.block_size}")

    @classmethod
    def unstructured(cls, sparsity=0.0, count=None):
        return cls('unstructured', sparsity=sparsity, count=count)

    @classmethod
    def nm(cls, n, m):
        return cls('nm', n=n, m=m)

    @classmethod
    def block(cls, block_size, sparsity):
        return cls('block', sparsity=sparsity, block_size=block_size)

    def pruned_count(self, total):
        """Number of prunable units (weights or blocks) out of `total`."""
        if self.count is not None:
            if self.count > total:
                raise UsageError(f"Cannot prune {self.count} of {total} weights")
            return self.count
        return int(round(self.sparsity * total))

    def check_columns(self, d_col):
        if self.kind == 'nm' and d_col % self.m:
            raise UsageError(f"M={self.m} does not divide d_col={d_col}")
        if self.kind == 'block' and d_col % self.block_size:
            raise UsageError(f"Block size {self.block_size} does not divide d_col={d_col}")


@dataclass
class PruneResult:
    """
    Attributes:
        weights: Compressed matrix
        ledgers: Per-row ledgers of what was actually pruned
        counts: Pruned steps per row (weights, or blocks in block mode)
        traces: Full-depth per-row traces (reusable for other sparsity levels)
        hessian: The dampened Hessian the solve used
    """
    weights: np.ndarray
    ledgers: List[LossLedger]
    counts: List[int]
    traces: List[RowTrace]
    hessian: np.ndarray

    def ledger_loss(self):
        return sum(l.total() for l in self.ledgers)


def ledger_squared_error(ledgers):
    """Squared output error ||WX - W_hat X||^2 accounted by the ledgers (damp 0)."""
    return 0.5 * sum(l.total() for l in ledgers)


def ledgers_to_json(ledgers, counts=None):
    rows = []
    for i, ledger in enumerate(ledgers):
        entry = {"row": i}
        entry.update(ledger.to_dict())
        if counts is not None:
            entry["pruned"] = int(counts[i])
        rows.append(entry)
    return {"rows": rows}


def ledgers_from_json(data):
    return [LossLedger.from_dict(r) for r in sorted(data["rows"], key=lambda r: r["row"])]


def _greedy_prune(w, state, k, record_snapshots, block_quota=None):
    # block_quota = (m, max_zeros): only blocks of m holding < max_zeros zeros are candidates
    w = np.array(w, dtype=np.float64)
    inv = state.inv
    order, deltas = [], []
    snapshots = np.empty((k, w.size)) if record_snapshots else None
    zeros_in_block = None
    if block_quota is not None:
        m, max_zeros = block_quota
        zeros_in_block = np.zeros(w.size // m, dtype=np.int64)

    for step in range(k):
        candidates = state.active_indices()
        if zeros_in_block is not None:
            candidates = candidates[zeros_in_block[candidates // m] < max_zeros]
        if candidates.size == 0:
            raise UsageError(f"No pruning candidates left after {step} of {k} steps")
        scores = w[candidates] ** 2 / inv[candidates, candidates]
        j = int(np.argmin(scores))
        p = int(candidates[j])

        w -= inv[:, p] * (w[p] / inv[p, p])
        w[p] = 0.0
        state.eliminate(p)

        order.append(p)
        deltas.append(float(scores[j]))
        if zeros_in_block is not None:
            zeros_in_block[p // m] += 1
        if snapshots is not None:
            snapshots[step] = w
    return RowTrace(order, deltas, snapshots=snapshots), w


def prune_row(w, inv_state, k, record_snapshots=False):
    """
    Prune k weights from one row with exact OBS, one weight at a time.

    Args:
        w (np.ndarray): Row vector (d_col,)
        inv_state (InverseHessianState): Fresh state; mutated in place
        k (int): Number of weights to prune (<= active count)
        record_snapshots (bool): Keep the row after every step

    Returns:
        tuple: (RowTrace, final row with pruned entries exactly 0)
    """
    if k > inv_state.active.sum():
        raise UsageError(f"Cannot prune {k} weights from {int(inv_state.active.sum())} active")
    return _greedy_prune(w, inv_state, k, record_snapshots)


def prune_row_on_support(w, h, k, record_snapshots=False):
    """
    prune_row for an already sparse row, solved on its nonzero support only.

    Existing zeros come first in the trace (ascending, delta 0), matching
    what the dense solver does with them.
    """
    w = np.array(w, dtype=np.float64)
    zeros = np.flatnonzero(w == 0)
    support = np.flatnonzero(w != 0)
    n_zero = min(zeros.size, k)

    order = [int(z) for z in zeros[:n_zero]]
    deltas = [0.0] * n_zero
    snapshots = np.empty((k, w.size)) if record_snapshots else None
    if snapshots is not None and n_zero:
        snapshots[:n_zero] = w

    rest = k - n_zero
    if rest == 0:
        return RowTrace(order, deltas, snapshots=snapshots), w

    state = InverseHessianState(masked_inverse(h, support))
    sub_trace, sub_w = _greedy_prune(w[support], state, rest, record_snapshots)
    order.extend(int(support[i]) for i in sub_trace.order)
    deltas.extend(sub_trace.deltas)

    final = np.zeros_like(w)
    final[support] = sub_w
    if snapshots is not None:
        snapshots[n_zero:] = 0.0
        snapshots[n_zero:, support] = sub_trace.snapshots
    return RowTrace(order, deltas, snapshots=snapshots), final


def select_global_mask(ledgers, k):
    """
    Choose how many weights each row prunes so that k weights are pruned
    in the order OBS would pick them on the whole matrix.

    Args:
        ledgers (list): Per-row LossLedger (or plain delta sequences)
        k (int): Total number of prunes

    Returns:
        list: Pruned count per row, summing to k
    """
    deltas = [list(getattr(l, 'deltas', l)) for l in ledgers]
    total = sum(len(d) for d in deltas)
    if not 0 <= k <= total:
        raise UsageError(f"Cannot select {k} prunes out of {total}")

    counts = [0] * len(deltas)
    heap = [(d[0], i) for i, d in enumerate(deltas) if d]
    heapq.heapify(heap)
    for _ in range(k):
        _, i = heapq.heappop(heap)
        counts[i] += 1
        if counts[i] < len(deltas[i]):
            heapq.heappush(heap, (deltas[i][counts[i]], i))
    return counts


def group_obs_reconstruct(w, h_inv, mask):
    """
    Zero the entries in mask and optimally update the rest:
    w - H^-1[:, M] ((H^-1)_M)^-1 w_M.

    Args:
        w (np.ndarray): Original row
        h_inv (np.ndarray): Dense inverse Hessian
        mask (iterable): Indices to prune

    Returns:
        np.ndarray: Reconstructed row, exactly 0 on mask
    """
    idx = np.unique(np.asarray(list(mask), dtype=np.int64))
    if idx.size == 0:
        raise UsageError("group_obs_reconstruct needs a nonempty mask")
    w = np.asarray(w, dtype=np.float64)
    try:
        coef = scipy.linalg.solve(h_inv[np.ix_(idx, idx)], w[idx], assume_a='pos')
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Masked inverse Hessian block is singular: {e}")
    result = w - h_inv[:, idx] @ coef
    result[idx] = 0.0
    return result


def materialize(weights, h_inv, traces, counts, mode='trace'):
    """
    Build the compressed matrix for per-row pruned counts.

    Args:
        weights (np.ndarray): Original W
        h_inv (np.ndarray): Dense inverse Hessian (recompute mode)
        traces (list): Full-depth RowTrace per row
        counts (list): Steps taken per row
        mode (str): 'trace' reloads snapshots, 'recompute' runs group OBS
    """
    if mode not in MODES:
        raise UsageError(f"Unknown materialization mode: {mode}")
    out = np.array(weights, dtype=np.float64)
    for i, (trace, count) in enumerate(zip(traces, counts)):
        if count == 0:
            continue
        if mode == 'trace':
            if trace.snapshots is None:
                raise UsageError(f"Row {i} has no snapshots; use recompute mode")
            out[i] = trace.snapshots[count - 1]
        else:
            out[i] = group_obs_reconstruct(weights[i], h_inv, trace.pruned_indices(count))
    return out


def _resolve_mode(mode, d_row, d_col, depth, snapshot_cap_mb, silent):
    if mode not in MODES:
        raise UsageError(f"Unknown materialization mode: {mode}")
    cap = SNAPSHOT_CAP_MB if snapshot_cap_mb is None else snapshot_cap_mb
    needed_mb = d_row * depth * d_col * 8 / 2 ** 20
    if mode == 'trace' and needed_mb > cap:
        if not silent:
            print(f"Warning: trace snapshots need {needed_mb:.0f} MB (cap {cap:.0f} MB); "
                  f"falling back to recompute mode")
        return 'recompute'
    return mode


def prune_unstructured(problem, target, damp=0.0, mode='trace', threads=1, compact=False,
                       snapshot_cap_mb=None, silent=True, debug=False):
    """
    Globally prune a layer to an unstructured sparsity target with ExactOBS.

    Args:
        problem (LayerProblem): Weights and calibration inputs
        target (SparsityTarget): kind 'unstructured'
        damp (str|float): Hessian dampening ("auto" or absolute)
        mode (str): 'trace' or 'recompute' materialization
        threads (int): Row worker count
        compact (bool): Solve already-sparse rows on their nonzero support
        snapshot_cap_mb (float): Trace memory cap, defaults to SNAPSHOT_CAP_MB
        silent (bool): Suppress progress output
        debug (bool): Print diagnostics

    Returns:
        PruneResult
    """
    if target.kind != 'unstructured':
        raise UsageError(f"prune_unstructured needs an unstructured target, got {target.kind}")
    d_row, d_col = problem.weights.shape
    k = target.pruned_count(d_row * d_col)
    mode = _resolve_mode(mode, d_row, d_col, d_col, snapshot_cap_mb, silent)
    record = mode == 'trace'

    h = compute_hessian(problem.inputs, damp)
    template = InverseHessianState.from_hessian(h)
    if debug:
        print(f"DEBUG: {problem.name}: pruning {k} of {d_row * d_col} weights ({mode} mode)")

    def solve_row(i):
        w = problem.weights[i]
        if compact and np.any(w == 0):
            return prune_row_on_support(w, h, d_col, record)[0]
        return prune_row(w, template.copy(), d_col, record)[0]

    traces = run_parallel(solve_row, range(d_row), threads, desc=f"Pruning {problem.name}", silent=silent)
    counts = select_global_mask(traces, k)
    weights = materialize(problem.weights, template.inv, traces, counts, mode)
    ledgers = [t.truncated(c) for t, c in zip(traces, counts)]
    return PruneResult(weights, ledgers, counts, traces, h)


def prune_nm(problem, n, m, damp=0.0, threads=1, silent=True, debug=False):
    """
    Prune every row to the N:M pattern (N nonzeros per M consecutive weights).

    The greedy OBS order is kept, but only blocks that still hold fewer than
    M - N zeros offer candidates. Every row ends at sparsity 1 - N/M, so no
    global step is needed.
    """
    target = SparsityTarget.nm(n, m)
    d_row, d_col = problem.weights.shape
    target.check_columns(d_col)
    k = d_col // m * (m - n)

    h = compute_hessian(problem.inputs, damp)
    template = InverseHessianState.from_hessian(h)
    if debug:
        print(f"DEBUG: {problem.name}: {n}:{m} pruning, {k} weights per row")

    def solve_row(i):
        return _greedy_prune(problem.weights[i], template.copy(), k, False, block_quota=(m, m - n))

    results = run_parallel(solve_row, range(d_row), threads, desc=f"Pruning {problem.name} {n}:{m}", silent=silent)
    weights = np.vstack([row for _, row in results]) if results else problem.weights.copy()
    traces = [trace for trace, _ in results]
    ledgers = [LossLedger(t.order, t.deltas) for t in traces]
    return PruneResult(weights, ledgers, [k] * d_row, traces, h)


def prune_block_row(w, inv_state, c, k, record_snapshots=False):
    """
    Prune k aligned blocks of size c from one row with group OBS.

    Each step removes the block P minimizing w_P^T ((H^-1)_P)^-1 w_P,
    applies the group update and eliminates every p in P from H^-1.
    """
    w = np.array(w, dtype=np.float64)
    inv = inv_state.inv
    n_blocks = w.size // c
    alive = np.ones(n_blocks, dtype=bool)
    order, deltas = [], []
    snapshots = np.empty((k, w.size)) if record_snapshots else None
    offsets = np.arange(c)

    for step in range(k):
        blocks = np.flatnonzero(alive)
        if blocks.size == 0:
            raise UsageError(f"No blocks left after {step} of {k} steps")
        idx = blocks[:, None] * c + offsets[None, :]
        subs = inv[idx[:, :, None], idx[:, None, :]]
        wp = w[idx]
        try:
            solved = np.linalg.solve(subs, wp[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"Block inverse Hessian is singular: {e}")
        scores = np.einsum('bi,bi->b', wp, solved)
        j = int(np.argmin(scores))
        b = int(blocks[j])
        members = idx[j]

        w -= inv[:, members] @ solved[j]
        w[members] = 0.0
        inv_state.eliminate_many(members)
        alive[b] = False

        order.append(b)
        deltas.append(float(scores[j]))
        if snapshots is not None:
            snapshots[step] = w
    return RowTrace(order, deltas, block_size=c, snapshots=snapshots), w


def prune_block(problem, c, sparsity, damp=0.0, mode='trace', threads=1, snapshot_cap_mb=None,
                silent=True, debug=False):
    """
    Block-sparse ExactOBS: contiguous, aligned blocks of c weights.

    Returns:
        PruneResult: ledgers and counts are over blocks
    """
    target = SparsityTarget.block(c, sparsity)
    d_row, d_col = problem.weights.shape
    target.check_columns(d_col)
    n_blocks = d_col // c
    k_blocks = target.pruned_count(d_row * n_blocks)
    mode = _resolve_mode(mode, d_row, d_col, n_blocks, snapshot_cap_mb, silent)
    record = mode == 'trace'

    h = compute_hessian(problem.inputs, damp)
    template = InverseHessianState.from_hessian(h)
    if debug:
        print(f"DEBUG: {problem.name}: pruning {k_blocks} of {d_row * n_blocks} blocks of {c}")

    def solve_row(i):
        return prune_block_row(problem.weights[i], template.copy(), c, n_blocks, record)[0]

    traces = run_parallel(solve_row, range(d_row), threads, desc=f"Block pruning {problem.name}", silent=silent)
    counts = select_global_mask(traces, k_blocks)
    weights = materialize(problem.weights, template.inv, traces, counts, mode)
    ledgers = [t.truncated(cnt) for t, cnt in zip(traces, counts)]
    return PruneResult(weights, ledgers, counts, traces, h)


def prune(problem, target, damp=0.0, mode='trace', threads=1, compact=False, silent=True, debug=False):
    """Dispatch on the target kind."""
    if target.kind == 'unstructured':
        return prune_unstructured(problem, target, damp, mode, threads, compact, silent=silent, debug=debug)
    if target.kind == 'nm':
        return prune_nm(problem, target.n, target.m, damp, threads, silent=silent, debug=debug)
    return prune_block(problem, target.block_size, target.sparsity, damp, mode, threads,
                       silent=silent, debug=debug)
