"""Dense float32 arithmetic, seeded RNG streams, and a finite-difference
gradient oracle.

Tensors are plain C-contiguous ``np.float32`` arrays. Reductions (dot
products, norms) accumulate in float64 and cast back, so results are
bit-reproducible for a fixed input regardless of where the call runs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DimensionError, NonFiniteError

FLOAT = np.float32

# Stream ids carve one user-facing seed into independent substreams. Every
# consumer of randomness in the package draws from one of these, so two runs
# with the same seed replay the same bytes.
STREAM_SIGNATURES = 1
STREAM_CLIPS = 2
STREAM_INIT = 3
STREAM_SHUFFLE = 4
STREAM_TPE = 5
STREAM_SPLIT = 6
STREAM_FINAL_SEEDS = 7


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Seeded generator for (seed, stream_id); identical pairs yield
    identical draw sequences on any platform."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, stream_id: int) -> int:
    """Collapse (seed, stream_id) into a fresh 63-bit seed."""
    return int(rng_stream(seed, stream_id).integers(0, 2**63 - 1))


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce to a finite, C-contiguous float32 array."""
    a = np.ascontiguousarray(data, dtype=FLOAT)
    if shape is not None and tuple(a.shape) != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {a.shape}")
    ensure_finite(a, "tensor")
    return a


def ensure_finite(a: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return a


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with float64 accumulation."""
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec shapes incompatible: {m.shape} x {v.shape}")
    ensure_finite(m, "matrix")
    ensure_finite(v, "vector")
    out = m.astype(np.float64) @ v.astype(np.float64)
    return out.astype(m.dtype if m.dtype == v.dtype else FLOAT)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in float64, clamped to [-1, 1] against rounding."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine shapes incompatible: {a.shape} vs {b.shape}")
    ensure_finite(a, "a")
    ensure_finite(b, "b")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    na = float(np.sqrt(np.dot(a64, a64)))
    nb = float(np.sqrt(np.dot(b64, b64)))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip(np.dot(a64, b64) / (na * nb), -1.0, 1.0))


def grad_check(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-3,
) -> float:
    """Max relative error between central differences of ``f`` and
    ``analytic_grad``, coordinate by coordinate.

    Error per coordinate is |cd_k - g_k| / max(1, |g_k|). ``f`` is evaluated
    at theta +- eps*e_k; evaluations must stay finite.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    theta = np.asarray(theta, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if theta.shape != analytic.shape:
        raise DimensionError(
            f"gradient shape {analytic.shape} does not match parameter {theta.shape}"
        )
    flat = theta.ravel()
    worst = 0.0
    for k in range(flat.size):
        saved = flat[k]
        flat[k] = saved + eps
        f_hi = float(f(theta))
        flat[k] = saved - eps
        f_lo = float(f(theta))
        flat[k] = saved
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NonFiniteError(f"f evaluated non-finite at coordinate {k}")
        cd = (f_hi - f_lo) / (2.0 * eps)
        g = analytic.ravel()[k]
        worst = max(worst, abs(cd - g) / max(1.0, abs(g)))
    return worst
