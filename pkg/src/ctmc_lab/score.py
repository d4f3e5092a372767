"""Concrete-score providers, the score-entropy loss and the Bregman diagnostic.

A provider answers ``s_u(y, x) ~ q_u(y) / q_u(x)`` for Hamming-1 pairs at
forward time ``u``.  Argument order is always *(target, source)*.  Besides the
scalar accessor, every provider exposes ``table(u)``: an ``(S^d, d, S)`` array
with ``table[x, i, a] = s_u(x with token i set to a, x)`` and ones where
``a == x^i``.  All exact computations go through the table.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import forward
from .errors import InvalidNeighbor, InvalidRate, InvalidSpec, InvalidTime
from .state_space import DensePmf, SpaceConfig, encode, hamming

_TABLE_CACHE = 256


class ScoreProvider:
    """Base class; subclasses implement :meth:`_raw_table`."""

    provenance = "abstract"

    def __init__(self, space: SpaceConfig, M: float = math.inf):
        if not M >= 1:
            raise InvalidSpec(f"clip bound M must be >= 1, got {M}")
        self.space = space
        self.M = float(M)
        self._cache: OrderedDict[float, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def _raw_table(self, u: float) -> np.ndarray:
        raise NotImplementedError

    def clip(self, values: np.ndarray) -> np.ndarray:
        if math.isinf(self.M):
            return values
        return np.clip(values, 1.0 / self.M, self.M)

    def table(self, u: float) -> np.ndarray:
        if not u > 0:
            raise InvalidTime(f"scores need forward time u > 0, got {u}")
        u = float(u)
        with self._lock:
            hit = self._cache.get(u)
            if hit is not None:
                self._cache.move_to_end(u)
                return hit
        tab = self.clip(self._raw_table(u))
        tab[self.space.self_mask] = 1.0
        tab.flags.writeable = False
        with self._lock:
            self._cache[u] = tab
            if len(self._cache) > _TABLE_CACHE:
                self._cache.popitem(last=False)
        return tab

    def evaluate(self, u: float, y: Sequence[int], x: Sequence[int]) -> float:
        """``s_u(y, x)`` for a Hamming-1 neighbour ``y`` of ``x``."""
        x, y = self.space.check(x), self.space.check(y)
        if hamming(x, y) != 1:
            raise InvalidNeighbor(f"{y} is not a Hamming-1 neighbour of {x}")
        i = next(j for j in range(self.space.d) if x[j] != y[j])
        return float(self.table(u)[encode(x, self.space), i, y[i]])


class ExactScoreProvider(ScoreProvider):
    provenance = "exact"

    def __init__(self, q0: DensePmf, M: float = math.inf):
        super().__init__(q0.space, M)
        self.q0 = q0

    def _raw_table(self, u):
        qt = forward.forward_marginal(self.q0, u).mass
        return forward.ratio_table(qt, self.space)

    def evaluate(self, u, y, x):
        # Goes through the cross-validated scalar oracle rather than the table.
        return float(self.clip(np.float64(forward.concrete_score_exact(self.q0, u, y, x))))


def exact_provider(q0: DensePmf, M: float = math.inf) -> ExactScoreProvider:
    return ExactScoreProvider(q0, M)


@dataclass(frozen=True)
class PerturbationSpec:
    """How to corrupt a base score: ``none``, ``constant`` (factor ``c``) or ``lognormal``."""

    kind: str = "none"
    c: float = 1.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "constant", "lognormal"):
            raise InvalidSpec(f"unknown perturbation kind {self.kind!r}")
        if not self.c > 0:
            raise InvalidSpec(f"perturbation factor c must be > 0, got {self.c}")
        if not self.sigma >= 0:
            raise InvalidSpec(f"lognormal sigma must be >= 0, got {self.sigma}")

    def to_dict(self) -> dict:
        if self.kind == "none":
            return {"kind": "none"}
        if self.kind == "constant":
            return {"kind": "constant", "c": self.c}
        return {"kind": "lognormal", "sigma": self.sigma, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "PerturbationSpec":
        return cls(**data)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def keyed_normals(seed: int, u: float, x_idx: np.ndarray, y_idx: np.ndarray) -> np.ndarray:
    """Standard normals that are a pure function of ``(seed, u, x, y)``."""
    with np.errstate(over="ignore"):
        ubits = np.array([u], dtype=np.float64).view(np.uint64)[0]
        h = _splitmix64(np.full(np.broadcast(x_idx, y_idx).shape, np.uint64(seed % 2**64)))
        h = _splitmix64(h ^ ubits)
        h = _splitmix64(h ^ np.asarray(x_idx, dtype=np.uint64))
        h = _splitmix64(h ^ np.asarray(y_idx, dtype=np.uint64))
        h2 = _splitmix64(h ^ np.uint64(0xD1B54A32D192ED03))
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    u2 = ((h2 >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class PerturbedScoreProvider(ScoreProvider):
    def __init__(self, base: ScoreProvider, spec: PerturbationSpec):
        super().__init__(base.space, base.M)
        self.base = base
        self.spec = spec

    @property
    def provenance(self):
        return f"perturbed({self.spec.to_dict()})"

    def _raw_table(self, u):
        tab = np.array(self.base.table(u))
        if self.spec.kind == "constant":
            tab *= self.spec.c
        elif self.spec.kind == "lognormal" and self.spec.sigma > 0:
            x_idx = np.arange(self.space.size)[:, None, None]
            z = keyed_normals(self.spec.seed, u, x_idx, self.space.neighbor_index)
            tab *= np.exp(self.spec.sigma * z)
        return tab


def perturbed_provider(base: ScoreProvider, spec: PerturbationSpec) -> ScoreProvider:
    if spec.kind == "none" or (spec.kind == "constant" and spec.c == 1.0):
        return base
    return PerturbedScoreProvider(base, spec)


def _se_terms(s: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Pointwise ``s - r - r log(s/r)``; zero exactly when ``s == r``."""
    return s - r - r * np.log(s / r)


def score_entropy_per_state(provider: ScoreProvider, q0: DensePmf, u: float) -> np.ndarray:
    space = q0.space
    qt = forward.forward_marginal(q0, u).mass
    r = forward.ratio_table(qt, space)
    s = provider.table(u)
    terms = _se_terms(s, r) / space.S
    terms[space.self_mask] = 0.0
    return terms.sum(axis=(1, 2))


def score_entropy_loss(provider: ScoreProvider, q0: DensePmf, u: float) -> float:
    """Score-entropy loss at forward time ``u``, expectation taken exactly over ``q_u``."""
    if not u > 0:
        raise InvalidTime("score-entropy loss needs u > 0")
    qt = forward.forward_marginal(q0, u).mass
    per_state = score_entropy_per_state(provider, q0, u)
    return float(max(np.dot(qt, per_state), 0.0))


def eps_score(provider: ScoreProvider, q0: DensePmf, grid) -> float:
    """Grid-weighted score error ``sum_k (t_{k+1}-t_k) L_SE(T - t_k)``."""
    pts = grid.points
    total = 0.0
    for k in range(len(pts) - 1):
        total += (pts[k + 1] - pts[k]) * score_entropy_loss(provider, q0, grid.T - pts[k])
    return float(total)


def bregman_rows(R_true: np.ndarray, H: np.ndarray, self_mask: np.ndarray) -> np.ndarray:
    """Per-state Bregman divergence between off-diagonal rate tables ``[x, i, a]``.

    ``g(x) = sum_y H(x,y) - R(x,y) + R(x,y) log(R(x,y)/H(x,y))``; entries
    where ``self_mask`` is set (``a == x^i``) are ignored.
    """
    mask = ~self_mask
    R = np.where(mask, R_true, 0.0)
    Hm = np.where(mask, H, 0.0)
    if np.any(Hm[mask] < 0):
        raise InvalidRate("sampler rate has a negative off-diagonal entry")
    bad = (Hm <= 0) & (R > 0)
    if np.any(bad):
        raise InvalidRate("sampler rate vanishes where the true reverse rate is positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(R > 0, R * np.log(R / np.where(Hm > 0, Hm, 1.0)), 0.0)
    g = (Hm - R + log_term).sum(axis=(1, 2))
    return np.maximum(g, 0.0)


def reverse_rate_at(q0: DensePmf, t: float, T: float) -> np.ndarray:
    """True reverse rate table at reverse time ``t`` (forward time ``T - t``)."""
    qt = forward.forward_marginal(q0, T - t).mass
    return forward.reverse_rate_table(qt, q0.space)


def bregman_g(
    provider: ScoreProvider,
    q0: DensePmf,
    t: float,
    T: float,
    x: Sequence[int],
    sampler_rate: Callable[[tuple, tuple], float] | None = None,
) -> float:
    """``g_t(x)`` for one state.

    ``sampler_rate(x, y)`` supplies the sampler's rate on Hamming-1 pairs; when
    omitted the fresh estimated rate ``s_{T-t}(y, x) / S`` is used.
    """
    space = q0.space
    x = space.check(x)
    if not 0 <= t < T:
        raise InvalidTime(f"reverse time must lie in [0, T), got t={t}, T={T}")
    xi = encode(x, space)
    R = reverse_rate_at(q0, t, T)[xi]
    if sampler_rate is None:
        H = provider.table(T - t)[xi] / space.S
    else:
        H = np.zeros((space.d, space.S))
        for i in range(space.d):
            for a in range(space.S):
                if a != x[i]:
                    y = x[:i] + (a,) + x[i + 1:]
                    H[i, a] = sampler_rate(x, y)
    return float(bregman_rows(R[None], H[None], space.self_mask[xi][None])[0])


def expected_bregman(q0: DensePmf, t: float, T: float, H: np.ndarray) -> float:
    """``E_{x ~ q_{T-t}}[g_t(x)]`` for a full sampler-rate table ``H``."""
    space = q0.space
    qt = forward.forward_marginal(q0, T - t).mass
    R = forward.reverse_rate_table(qt, space)
    return float(np.dot(qt, bregman_rows(R, H, space.self_mask)))
