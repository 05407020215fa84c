import numpy as np
import pytest


def random_spd(rng, n, jitter=0.5):
    A = rng.standard_normal((n, n))
    return A @ A.T + jitter * np.eye(n)


def gauss_jordan_inverse(A):
    """Inverse by row reduction with partial pivoting (independent of LAPACK)."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    M = np.hstack([A, np.eye(n)])
    for c in range(n):
        p = c + int(np.argmax(np.abs(M[c:, c])))
        M[[c, p]] = M[[p, c]]
        M[c] /= M[c, c]
        for r in range(n):
            if r != c:
                M[r] -= M[r, c] * M[c]
    return M[:, n:]


def toy_regression(rng, N=10, d=1, noise=0.1):
    X = rng.uniform(-2.0, 2.0, size=(N, d))
    y = np.sin(2.0 * X).sum(axis=1) + noise * rng.standard_normal(N)
    return X, y


def spread_inputs(rng, N, d=1, spacing=1.0):
    """Inputs roughly ``spacing`` lengthscales apart, so K_XX is well conditioned."""
    grid = spacing * np.arange(N)[:, None] + 0.2 * spacing * rng.uniform(size=(N, d))
    return grid - grid.mean(axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
