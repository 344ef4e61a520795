import numpy as np
import pytest

from removal_eval import FeatureMatrix


def random_spd(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Random symmetric positive-definite matrix with eigenvalues >= 0.1."""
    basis = rng.normal(size=(dim, dim))
    q, _ = np.linalg.qr(basis)
    eigvals = rng.uniform(0.1, 5.0, size=dim)
    return (q * eigvals) @ q.T


def feature_matrix(data, prefix: str = "img") -> FeatureMatrix:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    return FeatureMatrix([f"{prefix}{i}" for i in range(data.shape[0])], data)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
