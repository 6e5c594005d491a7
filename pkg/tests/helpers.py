"""Shared fixtures for the test modules."""

import numpy as np

from netrisk.spectral import companion_matrix

ONE_SHOT = np.zeros((2, 2, 2))
ONE_SHOT[1] = [[0, 0], [1, 0]]
ONE_SHOT[0] = np.eye(2)


def random_system(seed, N=3, p=2, max_radius=0.95, diagonal=False):
    """Random stable VAR lag matrices and a positive definite covariance."""
    rng = np.random.default_rng(seed)
    while True:
        Phi = rng.normal(0, 0.6 / (N * p) ** 0.5, (p, N, N))
        if np.abs(np.linalg.eigvals(companion_matrix(Phi))).max() < max_radius:
            break
    A = rng.normal(size=(N, N))
    S = A @ A.T + 0.5 * np.eye(N)
    if diagonal:
        S = np.diag(np.diag(S))
    return Phi, S
