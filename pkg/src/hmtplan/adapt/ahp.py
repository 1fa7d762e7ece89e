"""Analytic hierarchy process: criterion weights from a pairwise comparison matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Saaty's random consistency index by matrix order.
RANDOM_INDEX = {1: 0.0, 2: 0.0, 3: 0.58, 4: 0.90, 5: 1.12, 6: 1.24, 7: 1.32, 8: 1.41, 9: 1.45, 10: 1.49}
CR_THRESHOLD = 0.1


@dataclass(frozen=True)
class AHPResult:
    weights: tuple[float, ...]
    lambda_max: float
    consistency_index: float
    consistency_ratio: float
    iterations: int

    @property
    def consistent(self) -> bool:
        return self.consistency_ratio <= CR_THRESHOLD


def check_reciprocal(matrix: np.ndarray, tol: float = 1e-9) -> None:
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValueError("pairwise matrix must be square and non-empty")
    if not np.all(a > 0):
        raise ValueError("pairwise matrix entries must be positive")
    if not np.allclose(np.diag(a), 1.0, rtol=0, atol=tol):
        raise ValueError("pairwise matrix diagonal must be 1")
    if not np.allclose(a * a.T, 1.0, rtol=tol, atol=tol):
        raise ValueError("pairwise matrix is not reciprocal (a_ij * a_ji != 1)")


def ahp_weights(matrix, tol: float = 1e-13, max_iter: int = 10_000) -> AHPResult:
    """Principal eigenvector by power iteration, normalized to sum 1."""
    a = np.asarray(matrix, dtype=float)
    check_reciprocal(a)
    n = a.shape[0]
    w = np.full(n, 1.0 / n)
    it = 0
    for it in range(1, max_iter + 1):
        nxt = a @ w
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - w)) < tol:
            w = nxt
            break
        w = nxt
    lam = float(np.mean((a @ w) / w))
    ci = (lam - n) / (n - 1) if n > 1 else 0.0
    ri = RANDOM_INDEX.get(n, 1.49)
    cr = ci / ri if ri > 0 else 0.0
    return AHPResult(tuple(float(x) for x in w), lam, ci, max(0.0, cr), it)


def consistent_matrix(weights) -> np.ndarray:
    """The perfectly consistent matrix a_ij = w_i / w_j."""
    w = np.asarray(weights, dtype=float)
    return w[:, None] / w[None, :]


DEFAULT_CRITERIA = ("A", "E", "T_headroom", "M_headroom")
# Accuracy first, energy next, then latency and memory headroom.
DEFAULT_PAIRWISE = (
    (1.0, 2.0, 4.0, 4.0),
    (1 / 2, 1.0, 2.0, 2.0),
    (1 / 4, 1 / 2, 1.0, 1.0),
    (1 / 4, 1 / 2, 1.0, 1.0),
)
