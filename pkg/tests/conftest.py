import numpy as np
import pytest
from scipy.linalg import toeplitz

from services.tensor_io import LayerProblem


def correlated_inputs(rng, d_col, n_samples, rho=0.7):
    """Inputs whose features follow an AR(1) correlation, so H has real cross terms."""
    chol = np.linalg.cholesky(toeplitz(rho ** np.arange(d_col)))
    return chol @ rng.standard_normal((d_col, n_samples))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_problem():
    def _make(rng, d_row, d_col, n_samples=None, correlated=True, name="layer"):
        n_samples = n_samples or 4 * d_col
        if correlated:
            x = correlated_inputs(rng, d_col, n_samples)
        else:
            x = rng.standard_normal((d_col, n_samples))
        w = rng.standard_normal((d_row, d_col))
        return LayerProblem(w, x, name)
    return _make


@pytest.fixture
def log_dir(tmp_path, monkeypatch):
    path = tmp_path / "logs"
    monkeypatch.setenv('OBC_LOG_DIR', str(path))
    return path
