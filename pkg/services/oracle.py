"""
Brute-force references for the solvers.

Everything here recomputes from scratch with plain numpy (restricted
Hessians inverted anew at every step, masks and plans enumerated) and
shares no code with the solver modules. Used by the test suite and by
the CLI's --verify option on small layers.
"""
import itertools
import math

import numpy as np

from config.settings import EXHAUSTIVE_LIMIT
from utils.errors import InfeasibleBudgetError, NumericalError, UsageError


def _restricted_inverse(h, survivors):
    sub = h[np.ix_(survivors, survivors)]
    try:
        return np.linalg.inv(sub)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"Restricted Hessian is singular: {e}")


def _survivors(d, mask):
    mask = set(int(i) for i in mask)
    return np.array([i for i in range(d) if i not in mask], dtype=np.int64)


def naive_obs_step(w, h, mask, allowed=None):
    """
    One OBS step with H restricted to the surviving indices and inverted anew.

    Args:
        w (np.ndarray): Current row
        h (np.ndarray): Full Hessian
        mask (iterable): Indices already pruned
        allowed (iterable): Optional subset of survivors that may be chosen

    Returns:
        tuple: (chosen index, updated row, loss increase)
    """
    w = np.array(w, dtype=np.float64)
    survivors = _survivors(w.size, mask)
    if survivors.size == 0:
        raise UsageError("No surviving weights to prune")
    inv = _restricted_inverse(np.asarray(h, dtype=np.float64), survivors)
    ws = w[survivors]
    scores = ws ** 2 / np.diag(inv)
    if allowed is not None:
        allowed = set(int(i) for i in allowed)
        scores = np.where([int(s) in allowed for s in survivors], scores, np.inf)
    j = int(np.argmin(scores))
    w[survivors] = ws - inv[:, j] * (ws[j] / inv[j, j])
    w[survivors[j]] = 0.0
    return int(survivors[j]), w, float(scores[j])


def naive_prune_row(w, h, k):
    """k naive OBS steps. Returns (order, deltas, final row)."""
    w = np.array(w, dtype=np.float64)
    order, deltas = [], []
    for _ in range(k):
        p, w, delta = naive_obs_step(w, h, order)
        order.append(p)
        deltas.append(delta)
    return order, deltas, w


def naive_nm_prune_row(w, h, n, m):
    """Naive OBS restricted to blocks of m that still hold fewer than m - n zeros."""
    w = np.array(w, dtype=np.float64)
    if w.size % m:
        raise UsageError(f"M={m} does not divide {w.size}")
    order, deltas = [], []
    for _ in range(w.size // m * (m - n)):
        pruned = set(order)
        allowed = [i for i in range(w.size)
                   if i not in pruned and sum(1 for j in pruned if j // m == i // m) < m - n]
        p, w, delta = naive_obs_step(w, h, order, allowed)
        order.append(p)
        deltas.append(delta)
    return order, deltas, w


def naive_block_prune_row(w, h, c, k):
    """
    k naive group-OBS steps over aligned blocks of c weights.

    Returns:
        tuple: (block order, deltas, final row)
    """
    w = np.array(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    pruned_blocks = []
    deltas = []
    for _ in range(k):
        mask = [b * c + j for b in pruned_blocks for j in range(c)]
        survivors = _survivors(w.size, mask)
        inv = _restricted_inverse(h, survivors)
        position = {int(s): i for i, s in enumerate(survivors)}
        best = None
        for b in range(w.size // c):
            if b in pruned_blocks:
                continue
            local = [position[b * c + j] for j in range(c)]
            sub = inv[np.ix_(local, local)]
            coef = np.linalg.solve(sub, w[survivors][local])
            score = float(w[survivors][local] @ coef)
            if best is None or score < best[0]:
                best = (score, b, local, coef)
        score, b, local, coef = best
        ws = w[survivors] - inv[:, local] @ coef
        w[survivors] = ws
        w[[b * c + j for j in range(c)]] = 0.0
        pruned_blocks.append(b)
        deltas.append(score)
    return pruned_blocks, deltas, w


def _round_to_grid(x, scale, zero_point, bits, symmetric):
    lo, hi = (-2 ** (bits - 1), 2 ** (bits - 1) - 1) if symmetric else (0, 2 ** bits - 1)
    t = x / scale
    code = math.copysign(math.floor(abs(t) + 0.5), t) + zero_point
    code = min(max(code, lo), hi)
    return scale * (code - zero_point)


def naive_obq_row(w, h, grid, outliers=True):
    """
    Naive OBQ: restricted inverse recomputed at every step, grid rounding done locally.

    Args:
        w (np.ndarray): Row
        h (np.ndarray): Hessian
        grid: Object with scale, zero_point, bits and symmetric attributes
        outliers (bool): Quantize any weight with rounding error > scale/2 first

    Returns:
        tuple: (order, deltas, quantized row)
    """
    w = np.array(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    done, deltas = [], []
    for _ in range(w.size):
        survivors = _survivors(w.size, done)
        inv = _restricted_inverse(h, survivors)
        ws = w[survivors]
        q = np.array([_round_to_grid(v, grid.scale, grid.zero_point, grid.bits, grid.symmetric) for v in ws])
        err = q - ws
        scores = err ** 2 / np.diag(inv)
        j = int(np.argmin(scores))
        if outliers:
            big = [i for i in range(ws.size) if abs(err[i]) > grid.scale / 2]
            if big:
                j = max(big, key=lambda i: (abs(err[i]), -i))
        ws = ws + inv[:, j] * (err[j] / inv[j, j])
        ws[j] = q[j]
        w[survivors] = ws
        done.append(int(survivors[j]))
        deltas.append(float(scores[j]))
    return done, deltas, w


def naive_global_prune(weights, h, k):
    """
    Greedy OBS on the whole matrix: each step scans every row's surviving
    weights and prunes the global minimum (ties: lowest row, then index).

    Returns:
        tuple: (pruned matrix, list of (row, index, delta))
    """
    weights = np.array(weights, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    masks = [[] for _ in range(weights.shape[0])]
    steps = []
    for _ in range(k):
        best = None
        for i, row in enumerate(weights):
            survivors = _survivors(row.size, masks[i])
            if survivors.size == 0:
                continue
            inv = _restricted_inverse(h, survivors)
            scores = row[survivors] ** 2 / np.diag(inv)
            j = int(np.argmin(scores))
            if best is None or scores[j] < best[0]:
                best = (float(scores[j]), i)
        if best is None:
            raise UsageError(f"Cannot prune {k} weights from a {weights.shape} matrix")
        i = best[1]
        p, weights[i], delta = naive_obs_step(weights[i], h, masks[i])
        masks[i].append(p)
        steps.append((i, p, delta))
    return weights, steps


def exhaustive_mask(w, h, k, limit=EXHAUSTIVE_LIMIT):
    """
    Best k-weight mask by enumeration, each support refit by least squares.

    Args:
        w (np.ndarray): Row
        h (np.ndarray): Hessian
        k (int): Number of weights to prune

    Returns:
        tuple: (sorted mask tuple, loss (w - v)^T H (w - v), optimal row v)
    """
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = w.size
    if not 0 <= k <= d:
        raise UsageError(f"Cannot prune {k} of {d} weights")
    if math.comb(d, k) > limit:
        raise UsageError(f"C({d}, {k}) = {math.comb(d, k)} masks exceeds the enumeration limit {limit}")

    best = None
    for mask in itertools.combinations(range(d), k):
        mask = list(mask)
        support = [i for i in range(d) if i not in mask]
        v = np.zeros(d)
        v[support] = w[support]
        if support and mask:
            # Minimize (w - v)^T H (w - v) with v zero on the mask
            h_ss = h[np.ix_(support, support)]
            v[support] += np.linalg.solve(h_ss, h[np.ix_(support, mask)] @ w[mask])
        delta = w - v
        loss = float(delta @ h @ delta)
        if best is None or loss < best[1]:
            best = (tuple(mask), loss, v)
    return best


def exhaustive_allocate(db, budget, limit=EXHAUSTIVE_LIMIT):
    """
    Optimal level assignment by enumerating every combination.

    Returns:
        tuple: (choices {layer: label}, total_cost, total_loss)
    """
    layers = db.layers
    combos = math.prod(len(layer.levels) for layer in layers)
    if combos > limit:
        raise UsageError(f"{combos} level combinations exceed the enumeration limit {limit}")

    best = None
    for picks in itertools.product(*(layer.levels for layer in layers)):
        cost = sum(level.cost for level in picks)
        if cost > budget * (1 + 1e-12):
            continue
        loss = sum(level.loss for level in picks)
        if best is None or loss < best[2]:
            best = ({layer.name: level.label for layer, level in zip(layers, picks)}, cost, loss)
    if best is None:
        raise InfeasibleBudgetError(f"No level assignment fits the budget {budget}")
    return best
