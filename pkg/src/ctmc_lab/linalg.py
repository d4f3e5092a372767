"""Matrix exponential by scaling and squaring of a truncated Taylor series."""

from __future__ import annotations

import math

import numpy as np


def expm_taylor(A: np.ndarray, tol: float = 1e-16, max_terms: int = 200) -> np.ndarray:
    """Plain Taylor series of ``exp(A)``; only accurate for small ``||A||``."""
    A = np.asarray(A, dtype=np.float64)
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, max_terms):
        term = term @ A / k
        out = out + term
        if np.abs(term).max() < tol * max(1.0, np.abs(out).max()):
            break
    return out


def expm(A: np.ndarray, theta: float = 0.5) -> np.ndarray:
    """``exp(A)`` via scaling and squaring.

    ``A`` is scaled by ``2**-s`` until its 1-norm is below ``theta``, the series
    is summed to machine precision and the result squared ``s`` times.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expm needs a square matrix")
    norm = np.abs(A).sum(axis=0).max() if A.size else 0.0
    s = 0 if norm <= theta else int(math.ceil(math.log2(norm / theta)))
    E = expm_taylor(A / 2.0**s)
    for _ in range(s):
        E = E @ E
    return E
