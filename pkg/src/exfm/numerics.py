"""Dense linear algebra, seeded sampling and derivative checking.

Matrices and vectors are plain float64 numpy arrays. Every randomized routine
takes an explicit ``numpy.random.Generator`` built by :func:`seeded_rng`, so a
seed fully determines the output.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.linalg
import scipy.linalg.lapack

from .errors import SingularMatrix

# Counter-based generator; its stream is fixed by numpy's stability policy
# for a given seed regardless of platform.
RNG_ALGORITHM = "philox"

MAX_CONDITION = 1e12


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def child_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent 64-bit seeds from a master seed."""
    ss = np.random.SeedSequence(int(seed))
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(n)]


def sigmoid(z):
    """Logistic function, overflow-free for any finite input.

    Works on scalars and arrays; scalars in, float out.
    """
    z = np.asarray(z, dtype=np.float64)
    # exp of a non-positive argument never overflows.
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(z):
    """log(sigmoid(z)) without cancellation."""
    z = np.asarray(z, dtype=np.float64)
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def least_squares_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A v = b`` for a symmetric positive definite Gram matrix.

    Uses a Cholesky factorization. Raises :class:`SingularMatrix` instead of
    regularizing when ``A`` is numerically degenerate.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(b)):
        raise ValueError("non-finite entries in linear system")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix("matrix is not positive definite") from exc
    anorm = np.abs(A).sum(axis=0).max()
    rcond, info = scipy.linalg.lapack.dpocon(factor[0], anorm, uplo="L")
    if info != 0 or rcond * MAX_CONDITION < 1.0:
        raise SingularMatrix("condition estimate exceeds 1e12")
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def orthonormal_basis(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random ``rows x cols`` matrix with orthonormal rows (``M M^T = I``)."""
    if rows > cols:
        raise ValueError(f"need rows <= cols, got {rows} > {cols}")
    g = rng.standard_normal((cols, rows))
    q, r = np.linalg.qr(g)
    # Sign fix makes the result a deterministic function of g.
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q.T)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(x)
        flat[j] = orig - h
        fm = f(x)
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
