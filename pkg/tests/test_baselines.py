import numpy as np
import pytest

from services.allocator import measure_loss
from services.baselines import (
    iterative_magnitude_reconstruct, magnitude_prune, magnitude_reconstruct, nm_magnitude_reconstruct,
    reconstruct_row,
)
from services.hessian import compute_hessian
from services.sparse_solver import SparsityTarget, prune_nm, prune_unstructured


def test_magnitude_prune_drops_smallest():
    w = np.array([[0.5, -3.0], [2.0, -0.1]])
    assert np.array_equal(magnitude_prune(w, 0.5), [[0.0, -3.0], [2.0, 0.0]])


def test_reconstruct_row_diagonal_hessian_keeps_survivors():
    out = reconstruct_row(np.array([3.0, 1.0, 2.0]), 2.0 * np.eye(3), np.array([False, True, False]))
    assert np.array_equal(out, [3.0, 0.0, 2.0])


def test_reconstruction_improves_on_plain_magnitude(rng, make_problem):
    problem = make_problem(rng, 4, 12)
    plain = measure_loss(problem, magnitude_prune(problem.weights, 0.5))
    refit = measure_loss(problem, magnitude_reconstruct(problem, 0.5))
    assert refit <= plain + 1e-12


def test_exact_obs_beats_magnitude_reconstruction(rng, make_problem):
    wins = 0
    for _ in range(20):
        problem = make_problem(rng, 4, 12)
        obs = measure_loss(problem, prune_unstructured(problem, SparsityTarget.unstructured(0.5)).weights)
        mag = measure_loss(problem, magnitude_reconstruct(problem, 0.5))
        wins += obs <= mag + 1e-12
    assert wins >= 16


def test_nm_beats_magnitude_baseline(rng, make_problem):
    wins = 0
    for _ in range(100):
        problem = make_problem(rng, 4, 8)
        ours = prune_nm(problem, 2, 4).weights
        assert np.all(np.count_nonzero(ours.reshape(4, -1, 4), axis=2) == 2)
        wins += measure_loss(problem, ours) <= measure_loss(problem, nm_magnitude_reconstruct(problem, 2, 4)) + 1e-12
    assert wins >= 90


def test_nm_baseline_pattern(rng, make_problem):
    problem = make_problem(rng, 3, 8)
    blocks = nm_magnitude_reconstruct(problem, 1, 4).reshape(3, -1, 4)
    assert np.all(np.count_nonzero(blocks, axis=2) == 1)


def test_iterative_reaches_target(rng, make_problem):
    problem = make_problem(rng, 4, 10)
    result = iterative_magnitude_reconstruct(problem, 0.6, 3)
    assert np.count_nonzero(result == 0) == 24
    one_shot = iterative_magnitude_reconstruct(problem, 0.6, 1)
    assert np.allclose(one_shot, magnitude_reconstruct(problem, 0.6))


def test_reconstruct_row_is_least_squares(rng, make_problem):
    problem = make_problem(rng, 1, 6)
    h = compute_hessian(problem.inputs)
    mask = np.array([True, False, False, True, False, False])
    v = reconstruct_row(problem.weights[0], h, mask)
    delta = problem.weights[0] - v
    # Gradient of the loss vanishes on the support
    assert np.allclose((h @ delta)[~mask], 0.0, atol=1e-9 * np.max(np.abs(h)))
    assert pytest.approx(0.0) == np.sum(np.abs(v[mask]))
