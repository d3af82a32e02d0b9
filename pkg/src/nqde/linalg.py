"""Orthogonal-group kernels: matrix exponential, its adjoint derivative, polar projection."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, record

__all__ = [
    "ProjectionError",
    "expm",
    "expm_vjp",
    "skew",
    "polar_project",
    "orthogonality_error",
    "orthogonal_from_generator",
]

_TAYLOR_MIN_TERMS = 18
_TAYLOR_MAX_TERMS = 40


class ProjectionError(ArithmeticError):
    """Polar projection did not converge; ``residual`` is the last orthogonality error."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


def _square(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    return A


def expm(A) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a truncated Taylor series.

    ``A`` is scaled by ``2**-s`` so that its 1-norm is at most 0.5; the series
    is then summed until the next term is below machine precision relative to
    the partial sum (never fewer than 18 terms) and the result squared ``s``
    times.
    """
    A = _square(A)
    n = A.shape[0]
    norm = np.abs(A).sum(axis=0).max() if n else 0.0
    s = 0 if norm <= 0.5 else int(math.ceil(math.log2(norm / 0.5)))
    X = A / (2.0**s)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, _TAYLOR_MAX_TERMS + 1):
        term = term @ X / k
        result = result + term
        if k >= _TAYLOR_MIN_TERMS and np.abs(term).max() <= np.finfo(float).eps * np.abs(result).max():
            break
    for _ in range(s):
        result = result @ result
    return result


def expm_vjp(A, G) -> np.ndarray:
    """Adjoint of the Frechet derivative of ``expm`` at ``A`` applied to ``G``.

    This is the upper-right block of ``expm([[A^T, G], [0, A^T]])``.
    """
    A, G = _square(A), _square(G)
    n = A.shape[0]
    if G.shape != A.shape:
        raise ValueError(f"order mismatch: A is {A.shape}, G is {G.shape}")
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = A.T
    block[n:, n:] = A.T
    block[:n, n:] = G
    return expm(block)[:n, n:]


def skew(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return A - A.T


def orthogonality_error(W) -> float:
    """Frobenius norm of ``W^T W - I``."""
    W = _square(W)
    return float(np.linalg.norm(W.T @ W - np.eye(W.shape[0])))


def polar_project(M, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Nearest orthogonal matrix to ``M`` in Frobenius norm.

    Newton-Schulz iteration ``X <- 1.5 X - 0.5 X X^T X`` started from ``M``
    scaled below unit spectral norm. Matrices already orthogonal to ``tol``
    are returned unchanged.
    """
    M = _square(M)
    n = M.shape[0]
    eye = np.eye(n)
    err = float(np.linalg.norm(M.T @ M - eye))
    if err <= tol:
        return M.copy()
    fro = np.linalg.norm(M)
    if not np.isfinite(fro) or fro == 0.0:
        raise ProjectionError("cannot project a zero or non-finite matrix", err)
    # sqrt(||M||_1 ||M||_inf) and ||M||_F both bound the spectral norm
    bound = min(fro, math.sqrt(np.abs(M).sum(axis=0).max() * np.abs(M).sum(axis=1).max()))
    X = M / bound
    for _ in range(max_iter):
        X = 1.5 * X - 0.5 * X @ (X.T @ X)
        err = float(np.linalg.norm(X.T @ X - eye))
        if err <= tol:
            return X
        if not np.isfinite(err):
            break
    raise ProjectionError(
        f"polar projection did not reach orthogonality {tol:g} in {max_iter} iterations "
        f"(residual {err:.3e}); input is singular or nearly so",
        err,
    )


def orthogonal_from_generator(A: Tensor) -> Tensor:
    """Differentiable ``expm(A - A^T)``; the result is orthogonal for any square ``A``."""
    S = skew(A.data)

    def vjp(g):
        gs = expm_vjp(S, g)
        return (gs - gs.T,)

    return record("expm_skew", (A,), expm(S), vjp)
