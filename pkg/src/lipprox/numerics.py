"""Scalar and matrix primitives shared by the rest of the package.

Arrays are plain ``numpy.ndarray`` objects. Parameters are stored as float32
and every reduction (dot products, norms) is carried out in float64.

Randomness goes through :func:`make_rng`, which wraps numpy's PCG64 bit
generator. PCG64 streams are specified independently of platform, so a seed
reproduces the same draws everywhere. Independent streams for concurrent
tasks come from :func:`split_rng` (``SeedSequence.spawn``).
"""

from __future__ import annotations

import functools
import math
from typing import Callable

import numpy as np
from scipy.special import erf

__all__ = [
    "GELU_LIPSCHITZ_ROUNDED",
    "make_rng",
    "split_rng",
    "spectral_norm",
    "soft_threshold",
    "gelu",
    "gelu_derivative",
    "gelu_lipschitz_constant",
    "gelu_derivative_argmax",
    "finite_difference_gradient",
]

# Value read off the derivative plot; kept only to reproduce published tables.
GELU_LIPSCHITZ_ROUNDED = 1.12

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for a 64-bit unsigned seed."""
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent PCG64 generators from one seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


# Above this size the Gram matrix is too costly to square repeatedly.
SQUARING_MAX_DIM = 512


def spectral_norm(M, iters: int = 100, tol: float = 1e-10, seed: int = 0) -> float:
    """Largest singular value of a matrix by power iteration on ``M^T M``.

    The start vector is a seeded Gaussian; the iterate is renormalised every
    step and the loop exits early once the relative change of the estimate
    drops below ``tol``. The returned value is ``||M v||`` for a unit vector
    ``v`` and therefore never exceeds the true spectral norm.

    When the smaller side of ``M`` is at most ``SQUARING_MAX_DIM`` the Gram
    matrix is squared once per iteration, so iteration ``k`` applies the power
    ``2**k`` to the start vector. This keeps the estimate accurate when the two
    leading singular values are close.
    """
    M = np.asarray(M)
    if M.ndim != 2:
        raise ValueError(f"spectral_norm expects a matrix, got rank {M.ndim}")
    if M.size == 0:
        raise ValueError("degenerate shape")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    M = M.astype(np.float64, copy=False)
    if not np.all(np.isfinite(M)):
        raise ValueError("invalid input")
    if not np.any(M):
        return 0.0

    if min(M.shape) <= SQUARING_MAX_DIM:
        return _spectral_norm_squaring(M, iters, tol, seed)

    v = make_rng(seed).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = M @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            # v landed in the null space; a zero matrix is the only way to
            # stay here, anything else is fixed by a fresh direction.
            if not np.any(M):
                return 0.0
            v = np.roll(v, 1) + 1.0
            v /= np.linalg.norm(v)
            continue
        w = M.T @ u
        v = w / np.linalg.norm(w)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(np.linalg.norm(M @ v))


def _spectral_norm_squaring(M: np.ndarray, iters: int, tol: float, seed: int) -> float:
    # Work on the smaller Gram matrix; ||M^T u|| = ||M v|| at the optimum.
    A = M if M.shape[0] >= M.shape[1] else M.T
    B = A.T @ A
    B /= np.linalg.norm(B)
    v0 = make_rng(seed).standard_normal(B.shape[0])
    v0 /= np.linalg.norm(v0)
    sigma = 0.0
    best = 0.0
    for _ in range(iters):
        v = B @ v0
        nv = np.linalg.norm(v)
        if nv == 0.0 or not np.isfinite(nv):
            break
        v /= nv
        new_sigma = float(np.linalg.norm(A @ v))
        best = max(best, new_sigma)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            break
        sigma = new_sigma
        B = B @ B
        nb = np.linalg.norm(B)
        if nb == 0.0:
            break
        B /= nb
    return best


def soft_threshold(M, beta: float) -> np.ndarray:
    """Proximity operator of ``beta * ||.||_1``: ``sign(m) * max(|m| - beta, 0)``."""
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    M = np.asarray(M)
    return np.sign(M) * np.maximum(np.abs(M) - beta, 0.0)


def gelu(x):
    """Exact (erf-based) GELU, ``x/2 * (1 + erf(x/sqrt(2)))``."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + erf(x / _SQRT2))
    return float(out) if out.ndim == 0 else out


def gelu_derivative(x):
    """``x exp(-x^2/2)/sqrt(2 pi) + erf(x/sqrt(2))/2 + 1/2``."""
    x = np.asarray(x, dtype=np.float64)
    out = x * np.exp(-0.5 * x * x) / _SQRT2PI + 0.5 * erf(x / _SQRT2) + 0.5
    return float(out) if out.ndim == 0 else out


@functools.lru_cache(maxsize=None)
def _gelu_grid_max() -> tuple[float, float]:
    grid = np.arange(-60000, 60001, dtype=np.float64) * 1e-4
    vals = np.abs(gelu_derivative(grid))
    k = int(np.argmax(vals))
    return float(vals[k]), float(grid[k])


def gelu_lipschitz_constant() -> float:
    """Grid maximum of ``|gelu'|`` over [-6, 6] at step 1e-4 (about 1.1289).

    The derivative peaks at ``x = sqrt(2)`` where ``gelu''`` vanishes, and tends
    to 1 and 0 in the tails, so the grid window contains the global maximum.
    """
    return _gelu_grid_max()[0]


def gelu_derivative_argmax() -> float:
    """Grid location of the maximum of ``|gelu'|``."""
    return _gelu_grid_max()[1]


def finite_difference_gradient(
    fn: Callable[[np.ndarray], float], W, h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0:
        raise ValueError("h must be positive")
    W = np.array(W, dtype=np.float64)
    grad = np.empty_like(W)
    for idx in np.ndindex(W.shape):
        orig = W[idx]
        W[idx] = orig + h
        f_plus = float(fn(W))
        W[idx] = orig - h
        f_minus = float(fn(W))
        W[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"non-finite function value at entry {idx}")
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad
