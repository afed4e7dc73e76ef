"""Dense linear algebra helpers, Kronecker algebra and seeded randomness.

All arrays are ``float64``. Randomness always flows through an explicit
:class:`numpy.random.Generator` built on PCG64, which numpy guarantees to be
reproducible for a fixed seed across platforms.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

RngState = np.random.Generator

SYMMETRY_TOL = 1e-10


def make_rng(seed: int) -> RngState:
    """Return a PCG64-backed generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite entries")
    return x


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return a @ b


def kron(a, b) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"kron expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    return np.kron(a, b)


def _check_symmetric(m: np.ndarray, name: str, tol: float = SYMMETRY_TOL) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > tol * scale:
        raise ValidationError(f"{name} is not symmetric")


def vec(m: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation, so that ``vec(g a^T) == kron(a, g)``."""
    return np.asarray(m).reshape(-1, order="F")


def kron_quadratic_form(dW, A, G) -> float:
    """Evaluate ``vec(dW)^T (A kron G) vec(dW)`` as ``trace(dW^T G dW A)``.

    ``dW`` is ``out x in``, ``A`` is ``in x in`` and ``G`` is ``out x out``.
    """
    dW, A, G = as_tensor(dW), as_tensor(A), as_tensor(G)
    _check_symmetric(A, "A")
    _check_symmetric(G, "G")
    if dW.ndim != 2 or dW.shape != (G.shape[0], A.shape[0]):
        raise DimensionError(
            f"dW shape {dW.shape} does not match factors G{G.shape}, A{A.shape}"
        )
    return float(np.sum((G @ dW) * (dW @ A)))


def max_eigenvalue(
    m,
    rng: RngState,
    iters: int = 1000,
    tol: float = 1e-10,
) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Stops once two successive Rayleigh quotients agree to relative ``tol``.
    """
    m = as_tensor(m)
    _check_symmetric(m, "matrix", tol=1e-8)
    n = m.shape[0]
    if n == 0 or not np.any(m):
        return 0.0
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = float(v @ m @ v)
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ m @ v)
        if abs(new - lam) <= tol * max(abs(new), np.finfo(float).tiny):
            return new
        lam = new
    return lam


def finite_difference_directional(
    f: Callable[[np.ndarray], np.ndarray],
    x,
    v,
    h: float = 1e-5,
) -> np.ndarray:
    """Central difference ``(f(x + h v) - f(x - h v)) / 2h``."""
    x, v = as_tensor(x), as_tensor(v)
    if x.shape != v.shape:
        raise DimensionError(f"direction shape {v.shape} != point shape {x.shape}")
    if not h > 0:
        raise ValidationError("step h must be positive")
    hi = as_tensor(f(x + h * v))
    lo = as_tensor(f(x - h * v))
    check_finite(hi, "f(x + h v)")
    check_finite(lo, "f(x - h v)")
    return (hi - lo) / (2.0 * h)


def derive_rng(seed: int, stream: int) -> RngState:
    """Independent PCG64 stream ``stream`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))
