"""Closed-form forward process for the uniform base rate ``R_base = 11^T/S - I``.

With a constant noise schedule every token evolves independently under
``exp(t R_base)``, whose entries are ``(1 + (S-1)e^{-t})/S`` on the diagonal
and ``(1 - e^{-t})/S`` off it.  Everything here works on the full enumerated
space; the marginal is propagated one axis at a time rather than through an
``S^d x S^d`` matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import DegenerateConditioning, InvalidNeighbor, InvalidTime
from .state_space import DensePmf, SpaceConfig, differing_index, encode, hamming

SCORE_XVAL_TOL = 1e-10


@dataclass(frozen=True)
class ForwardKernel:
    t: float
    S: int
    diag: float
    offdiag: float

    def matrix(self) -> np.ndarray:
        K = np.full((self.S, self.S), self.offdiag)
        np.fill_diagonal(K, self.diag)
        return K


def token_kernel(t: float, S: int) -> ForwardKernel:
    if not t >= 0:
        raise InvalidTime(f"forward time must be non-negative, got {t}")
    if t == math.inf:
        return ForwardKernel(t, S, 1.0 / S, 1.0 / S)
    e = math.exp(-t)
    # -expm1 keeps the off-diagonal accurate for tiny t.
    return ForwardKernel(t, S, (1.0 + (S - 1) * e) / S, -math.expm1(-t) / S)


def signed_token_kernel(delta: float, S: int) -> np.ndarray:
    """``exp(delta * R_base)`` for any real ``delta`` (negative allowed)."""
    e = math.exp(-delta)
    off = -math.expm1(-delta) / S
    K = np.full((S, S), off)
    np.fill_diagonal(K, (1.0 + (S - 1) * e) / S)
    return K


def base_rate_matrix(S: int) -> np.ndarray:
    return np.full((S, S), 1.0 / S) - np.eye(S)


def _apply_per_axis(mass: np.ndarray, K: np.ndarray, space: SpaceConfig) -> np.ndarray:
    """Compute ``sum_{x0} mass(x0) prod_i K[x0^i, x^i]`` axis by axis."""
    T = mass.reshape((space.S,) * space.d, order="F")
    for axis in range(space.d):
        T = np.moveaxis(np.tensordot(T, K, axes=([axis], [0])), -1, axis)
    return T.reshape(-1, order="F")


def forward_marginal(q0: DensePmf, t: float) -> DensePmf:
    if t < 0:
        raise InvalidTime(f"forward time must be non-negative, got {t}")
    if t == 0:
        return q0
    K = token_kernel(t, q0.space.S).matrix()
    m = _apply_per_axis(q0.mass, K, q0.space)
    m = np.clip(m, 0.0, None)
    return DensePmf(m / m.sum(), q0.space)


def _joint_kernel_column(space: SpaceConfig, t: float, x: Sequence[int]) -> np.ndarray:
    """``q_{t|0}(x | x0)`` for every ``x0`` in index order."""
    K = token_kernel(t, space.S).matrix()
    st = space.states
    out = np.ones(space.size)
    for i, xi in enumerate(x):
        out *= K[st[:, i], xi]
    return out


def posterior(q0: DensePmf, t: float, x: Sequence[int]) -> DensePmf:
    """``q_{0|t}(. | x)`` by Bayes over the enumerated space."""
    space = q0.space
    x = space.check(x)
    if t < 0:
        raise InvalidTime(f"forward time must be non-negative, got {t}")
    joint = q0.mass * _joint_kernel_column(space, t, x)
    z = joint.sum()
    if z <= 0:
        raise DegenerateConditioning(f"q_t(x) = 0 at t={t}, x={x}")
    return DensePmf(joint / z, space)


def ratio_table(qt: np.ndarray, space: SpaceConfig) -> np.ndarray:
    """``r[x, i, a] = q(x with token i set to a) / q(x)``; entries with ``a == x^i`` are 1."""
    qt = np.asarray(qt, dtype=np.float64)
    if np.any(qt <= 0):
        raise DegenerateConditioning("marginal has zero mass; ratios undefined")
    return qt[space.neighbor_index] / qt[:, None, None]


def concrete_score_direct(q0: DensePmf, t: float, y, x) -> float:
    qt = forward_marginal(q0, t)
    qx = qt[x]
    if qx <= 0:
        raise DegenerateConditioning(f"q_t(x) = 0 at t={t}, x={tuple(x)}")
    return qt[y] / qx


def concrete_score_posterior(q0: DensePmf, t: float, y, x) -> float:
    """Posterior-expectation form: ``E_{x0 ~ q_{0|t}(.|x)} K(x0^j, y^j) / K(x0^j, x^j)``."""
    j = differing_index(x, y)
    post = posterior(q0, t, x)
    K = token_kernel(t, q0.space.S).matrix()
    col = q0.space.states[:, j]
    return float(np.dot(post.mass, K[col, y[j]] / K[col, x[j]]))


def concrete_score_exact(q0: DensePmf, t: float, y, x) -> float:
    """Exact concrete score ``q_t(y) / q_t(x)`` for a Hamming-1 pair.

    Evaluated two ways (direct marginal ratio and posterior expectation) and
    cross-checked; a disagreement beyond ``SCORE_XVAL_TOL`` is a bug.
    """
    space = q0.space
    x, y = space.check(x), space.check(y)
    if hamming(x, y) != 1:
        raise InvalidNeighbor(f"{x} and {y} are not Hamming-1 neighbours")
    if t <= 0:
        raise InvalidTime("concrete scores need t > 0")
    direct = concrete_score_direct(q0, t, y, x)
    via_posterior = concrete_score_posterior(q0, t, y, x)
    if abs(direct - via_posterior) > SCORE_XVAL_TOL * max(1.0, abs(direct)):
        raise AssertionError(f"score cross-validation failed: {direct!r} vs {via_posterior!r}")
    return direct


class RatioCase(str, Enum):
    BOTH_DIFFER = "both-differ"
    X_MATCHES = "x-matches"
    Y_MATCHES = "y-matches"


def token_ratio_case(t: float, S: int, case: RatioCase | str) -> float:
    """Per-token ratio ``K(x0, y) / K(x0, x)`` by which of ``x``, ``y`` equals ``x0``."""
    if t <= 0:
        raise InvalidTime("token ratio needs t > 0")
    case = RatioCase(case)
    if case is RatioCase.BOTH_DIFFER:
        return 1.0
    e = math.exp(-t)
    low = -math.expm1(-t) / (1.0 + (S - 1) * e)
    return low if case is RatioCase.X_MATCHES else 1.0 / low


def forward_rate(x, y, space: SpaceConfig) -> float:
    x, y = space.check(x), space.check(y)
    h = hamming(x, y)
    if h == 0:
        return -(space.S - 1) * space.d / space.S
    return 1.0 / space.S if h == 1 else 0.0


def reverse_rate_exact(q0: DensePmf, u: float, x, y) -> float:
    """True reverse rate at forward time ``u``: ``R(y, x) q_u(y) / q_u(x)``."""
    space = q0.space
    x, y = space.check(x), space.check(y)
    if u <= 0:
        raise InvalidTime("reverse rates need forward time u > 0")
    h = hamming(x, y)
    if h >= 2:
        return 0.0
    qt = forward_marginal(q0, u)
    if qt[x] <= 0:
        raise DegenerateConditioning(f"q_u(x) = 0 at u={u}, x={x}")
    if h == 1:
        return qt[y] / qt[x] / space.S
    r = ratio_table(qt.mass, space)[encode(x, space)]
    return -(r.sum() - space.d) / space.S


def reverse_rate_table(qt: np.ndarray, space: SpaceConfig) -> np.ndarray:
    """Off-diagonal reverse rates ``[x, i, a]``; entries with ``a == x^i`` are zeroed."""
    R = ratio_table(qt, space) / space.S
    R[space.self_mask] = 0.0
    return R


def sup_ratio_bound(u: float, S: int) -> float:
    """Largest attainable Hamming-1 ratio at forward time ``u``: ``1 + S/(e^u - 1)``."""
    return 1.0 + S / math.expm1(u)


def score_sup_bound_check(q0: DensePmf, u: float) -> tuple[float, float]:
    if u <= 0:
        raise InvalidTime("bound check needs u > 0")
    space = q0.space
    qt = forward_marginal(q0, u).mass
    r = ratio_table(qt, space).copy()
    r[space.self_mask] = -np.inf
    sup = float(r.max())
    bound = sup_ratio_bound(u, space.S)
    if sup > bound * (1 + 1e-12):
        raise AssertionError(f"sup ratio {sup!r} exceeds bound {bound!r} at u={u}")
    return sup, bound
