"""Hot elementwise / enumeration kernels with a numba path and a numpy path.

The numba path is used when numba imports cleanly and ``IMDM_NUMBA`` is not
set to ``0``.  Both paths compute the same values; the numba versions only
exist because these loops run on every training step and every decode step.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf, ndtr

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _numba_requested() -> bool:
    return os.environ.get("IMDM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:  # pragma: no cover - depends on environment
    if not _numba_requested():
        raise ImportError("numba disabled by IMDM_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def gelu_np(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * cdf, cdf + x * pdf


def inverse_cdf_np(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cum).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def product_joint_np(factors: np.ndarray) -> np.ndarray:
    """Average over draws of the product distribution of per-position factors.

    ``factors`` has shape (E, L, N); the result has shape (N**L,) in
    lexicographic order (position 0 most significant).
    """
    n_draws, length, n = factors.shape
    joint = np.ones((n_draws, 1))
    for pos in range(length):
        joint = (joint[:, :, None] * factors[:, pos, None, :]).reshape(n_draws, -1)
    # pairwise summation keeps the reduction order fixed
    return np.add.reduce(joint, axis=0) / n_draws


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _gelu_nb(x):  # pragma: no cover - compiled
        flat = x.ravel()
        y = np.empty_like(flat)
        dy = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            cdf = 0.5 * (1.0 + math.erf(v / 1.4142135623730951))
            pdf = 0.3989422804014327 * math.exp(-0.5 * v * v)
            y[i] = v * cdf
            dy[i] = cdf + v * pdf
        return y.reshape(x.shape), dy.reshape(x.shape)

    @njit(cache=True)
    def _inverse_cdf_nb(probs, u):  # pragma: no cover - compiled
        rows, n = probs.shape
        out = np.empty(rows, dtype=np.int64)
        for r in range(rows):
            acc = 0.0
            k = n - 1
            for j in range(n):
                acc += probs[r, j]
                if u[r] < acc:
                    k = j
                    break
            out[r] = k
        return out

    @njit(cache=True)
    def _product_joint_nb(factors):  # pragma: no cover - compiled
        n_draws, length, n = factors.shape
        size = n**length
        total = np.zeros(size)
        for e in range(n_draws):
            for idx in range(size):
                rem = idx
                p = 1.0
                for pos in range(length - 1, -1, -1):
                    p *= factors[e, pos, rem % n]
                    rem //= n
                total[idx] += p
        return total / n_draws


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact (erf-based) GeLU and its derivative."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA:
        return _gelu_nb(x)
    return gelu_np(x)


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw: smallest k with u < cumsum(probs)[k]."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    if HAVE_NUMBA:
        return _inverse_cdf_nb(probs, u)
    return inverse_cdf_np(probs, u)


def product_joint(factors: np.ndarray) -> np.ndarray:
    factors = np.ascontiguousarray(factors, dtype=np.float64)
    if HAVE_NUMBA:
        return _product_joint_nb(factors)
    return product_joint_np(factors)


def std_normal_cdf(x: np.ndarray) -> np.ndarray:
    return ndtr(x)
