import numpy as np
import pytest

from services.hessian import (
    InverseHessianState, compute_hessian, invert_spd, masked_inverse, quadratic_loss, resolve_damp,
)
from utils.errors import NumericalError, UsageError


def random_spd(rng, d, n=None):
    x = rng.standard_normal((d, n or 4 * d))
    return compute_hessian(x)


def test_identity_inputs():
    assert np.array_equal(compute_hessian(np.eye(2)), [[2.0, 0.0], [0.0, 2.0]])


def test_damp_on_rank_one_inputs():
    h = compute_hessian(np.array([[1.0, 0.0], [0.0, 0.0]]), damp=1.0)
    assert np.array_equal(h, np.diag([3.0, 1.0]))


def test_matches_loop_multiply(rng):
    x = rng.standard_normal((4, 16))
    expected = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            for n in range(16):
                expected[i, j] += 2.0 * x[i, n] * x[j, n]
    h = compute_hessian(x)
    assert np.max(np.abs(h - expected)) / np.max(np.abs(expected)) < 1e-12
    assert np.array_equal(h, h.T)


def test_batches_accumulate(rng):
    x = rng.standard_normal((3, 10))
    assert np.allclose(compute_hessian([x, x]), 2.0 * compute_hessian(x), rtol=1e-14, atol=0)


def test_batches_must_agree_on_columns(rng):
    with pytest.raises(UsageError):
        compute_hessian([rng.standard_normal((3, 4)), rng.standard_normal((2, 4))])


def test_resolve_damp():
    h = np.diag([2.0, 4.0])
    assert resolve_damp("auto", h) == pytest.approx(0.03)
    assert resolve_damp("0.5", h) == 0.5
    assert resolve_damp(None, h) == 0.0
    with pytest.raises(UsageError):
        resolve_damp(-1.0, h)
    with pytest.raises(UsageError):
        resolve_damp("lots", h)


def test_auto_damp_adds_fraction_of_mean_diagonal(rng):
    x = rng.standard_normal((5, 20))
    plain = compute_hessian(x)
    damped = compute_hessian(x, "auto")
    assert np.allclose(np.diag(damped) - np.diag(plain), 0.01 * np.mean(np.diag(plain)))


def test_invert_diagonal():
    assert np.allclose(invert_spd(np.diag([2.0, 2.0])), np.diag([0.5, 0.5]))


def test_invert_two_by_two():
    expected = np.array([[2.0, -1.0], [-1.0, 2.0]]) / 3.0
    assert np.allclose(invert_spd(np.array([[2.0, 1.0], [1.0, 2.0]])), expected, atol=1e-15)


def test_rank_deficient_hessian_fails(rng):
    # N < d_col: 2XX^T has rank 2
    h = compute_hessian(rng.standard_normal((4, 2)))
    with pytest.raises(NumericalError) as info:
        invert_spd(h)
    assert info.value.pivot is not None


def test_indefinite_matrix_fails():
    with pytest.raises(NumericalError, match="pivot 1"):
        invert_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_non_symmetric_matrix_rejected():
    with pytest.raises(UsageError):
        invert_spd(np.array([[2.0, 1.0], [0.0, 2.0]]))


def test_eliminate_two_by_two():
    state = InverseHessianState(np.array([[2.0, -1.0], [-1.0, 2.0]]) / 3.0)
    state.eliminate(1)
    assert np.allclose(state.active_submatrix(), [[0.5]])
    assert list(state.active_indices()) == [0]


def test_eliminate_diagonal():
    state = InverseHessianState(0.5 * np.eye(2))
    state.eliminate(0)
    assert np.allclose(state.active_submatrix(), [[0.5]])


def test_eliminate_matches_minor_inverse(rng):
    h = random_spd(rng, 8)
    for p in range(8):
        state = InverseHessianState.from_hessian(h)
        state.eliminate(p)
        keep = [i for i in range(8) if i != p]
        direct = invert_spd(h[np.ix_(keep, keep)])
        scale = np.max(np.abs(direct))
        assert np.max(np.abs(state.active_submatrix() - direct)) < 1e-10 * scale


def test_eliminated_rows_and_columns_are_zero(rng):
    state = InverseHessianState.from_hessian(random_spd(rng, 5))
    state.eliminate(2)
    assert not np.any(state.inv[2, [0, 1, 3, 4]])
    assert not np.any(state.inv[[0, 1, 3, 4], 2])


def test_eliminate_twice_rejected(rng):
    state = InverseHessianState.from_hessian(random_spd(rng, 3))
    state.eliminate(0)
    with pytest.raises(UsageError):
        state.eliminate(0)


def test_small_pivot_is_breakdown():
    state = InverseHessianState(np.eye(2), threshold=2.0)
    with pytest.raises(NumericalError) as info:
        state.eliminate(0)
    assert info.value.pivot == 0


def test_copy_is_independent(rng):
    template = InverseHessianState.from_hessian(random_spd(rng, 4))
    before = template.inv.copy()
    work = template.copy()
    work.eliminate(1)
    assert np.array_equal(template.inv, before)
    assert template.active.all()


def test_masked_inverse_examples(rng):
    assert np.allclose(masked_inverse(np.diag([2.0, 4.0]), [1]), [[0.25]])
    h = random_spd(rng, 4)
    assert np.allclose(masked_inverse(h, range(4)), invert_spd(h))


def test_masked_inverse_matches_elimination_sequence(rng):
    h = random_spd(rng, 6)
    mask = [0, 2, 5]
    state = InverseHessianState.from_hessian(h)
    state.eliminate_many([1, 3, 4])
    direct = masked_inverse(h, mask)
    assert np.max(np.abs(state.active_submatrix() - direct)) < 1e-10 * np.max(np.abs(direct))


def test_quadratic_loss():
    h = np.diag([2.0, 4.0])
    assert quadratic_loss([1.0, 1.0], [0.0, 0.5], h) == pytest.approx(2.0 + 1.0)
