"""Enumeration and neighbourhood structure of the token space ``{0..S-1}^d``.

Tokens are 0-based everywhere, including the CLI and CSV outputs.  A state is
a plain tuple of ints; its flat index uses the mixed-radix layout
``index = sum_i tokens[i] * S**i`` (dimension 0 least significant), which is
also the row/column order of every dense kernel in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import ExactModeUnavailable, InvalidConfig, InvalidInput, InvalidNeighbor, InvalidState

TokenState = tuple[int, ...]

DEFAULT_EXACT_CAP = 65536
PMF_TOL = 1e-12


@dataclass(frozen=True)
class SpaceConfig:
    S: int
    d: int
    exact_cap: int = DEFAULT_EXACT_CAP

    def __post_init__(self):
        if int(self.S) != self.S or self.S < 2:
            raise InvalidConfig(f"vocabulary size S must be an integer >= 2, got {self.S}")
        if int(self.d) != self.d or self.d < 1:
            raise InvalidConfig(f"dimension d must be an integer >= 1, got {self.d}")
        if self.exact_cap < 1:
            raise InvalidConfig("exact_cap must be positive")

    @property
    def size(self) -> int:
        return self.S**self.d

    @property
    def enumerable(self) -> bool:
        return self.size <= self.exact_cap

    def require_exact(self):
        if not self.enumerable:
            raise ExactModeUnavailable(
                f"S^d = {self.S}^{self.d} = {self.size} exceeds exact_cap = {self.exact_cap}"
            )

    @cached_property
    def radix(self) -> np.ndarray:
        return self.S ** np.arange(self.d, dtype=np.int64)

    @cached_property
    def states(self) -> np.ndarray:
        """All states as an ``(S^d, d)`` integer array in index order."""
        self.require_exact()
        idx = np.arange(self.size, dtype=np.int64)
        out = (idx[:, None] // self.radix[None, :]) % self.S
        out.flags.writeable = False
        return out

    @cached_property
    def neighbor_index(self) -> np.ndarray:
        """``nbr[x, i, a]`` is the index of ``x`` with token ``i`` replaced by ``a``.

        The entry with ``a == x^i`` points back at ``x`` itself.
        """
        st = self.states
        base = np.arange(self.size, dtype=np.int64)
        a = np.arange(self.S, dtype=np.int64)
        out = base[:, None, None] + (a[None, None, :] - st[:, :, None]) * self.radix[None, :, None]
        out.flags.writeable = False
        return out

    @cached_property
    def self_mask(self) -> np.ndarray:
        """Boolean ``(S^d, d, S)`` mask that is True where ``a == x^i``."""
        st = self.states
        out = st[:, :, None] == np.arange(self.S)[None, None, :]
        out.flags.writeable = False
        return out

    def check(self, state: Sequence[int]) -> TokenState:
        state = tuple(int(v) for v in state)
        if len(state) != self.d:
            raise InvalidState(f"state {state} has length {len(state)}, expected d={self.d}")
        for v in state:
            if not 0 <= v < self.S:
                raise InvalidState(f"token {v} out of range [0, {self.S}) in state {state}")
        return state


def encode(state: Sequence[int], space: SpaceConfig) -> int:
    state = space.check(state)
    return int(sum(v * space.S**i for i, v in enumerate(state)))


def decode(index: int, space: SpaceConfig) -> TokenState:
    if not 0 <= index < space.size:
        raise InvalidState(f"index {index} out of range [0, {space.size})")
    out = []
    for _ in range(space.d):
        index, r = divmod(index, space.S)
        out.append(r)
    return tuple(out)


def hamming(x: Sequence[int], y: Sequence[int]) -> int:
    if len(x) != len(y):
        raise InvalidState(f"dimension mismatch: {len(x)} vs {len(y)}")
    return sum(1 for a, b in zip(x, y) if a != b)


def substitute(x: Sequence[int], i: int, a: int) -> TokenState:
    out = list(x)
    out[i] = a
    return tuple(out)


def neighbors(x: Sequence[int], space: SpaceConfig) -> list[TokenState]:
    """All ``d(S-1)`` states at Hamming distance one from ``x``."""
    x = space.check(x)
    return [substitute(x, i, a) for i in range(space.d) for a in range(space.S) if a != x[i]]


def differing_index(x: Sequence[int], y: Sequence[int]) -> int:
    """The single coordinate where Hamming-1 neighbours differ."""
    diff = [i for i, (a, b) in enumerate(zip(x, y)) if a != b]
    if len(diff) != 1:
        raise InvalidNeighbor(f"{tuple(x)} and {tuple(y)} are not Hamming-1 neighbours")
    return diff[0]


@dataclass(frozen=True, eq=False)
class DensePmf:
    """Probability mass over the full enumerated space, indexed by :func:`encode`."""

    mass: np.ndarray
    space: SpaceConfig

    def __post_init__(self):
        self.space.require_exact()
        mass = np.array(self.mass, dtype=np.float64)
        if mass.shape != (self.space.size,):
            raise InvalidInput(f"pmf has shape {mass.shape}, expected ({self.space.size},)")
        if not np.all(np.isfinite(mass)) or mass.min() < 0:
            raise InvalidInput("pmf entries must be finite and non-negative")
        total = mass.sum()
        if abs(total - 1.0) > PMF_TOL * max(1.0, np.sqrt(mass.size)):
            raise InvalidInput(f"pmf sums to {total!r}, not 1")
        mass.flags.writeable = False
        object.__setattr__(self, "mass", mass)

    def __getitem__(self, state) -> float:
        return float(self.mass[encode(state, self.space)])

    @classmethod
    def from_unnormalized(cls, weights, space: SpaceConfig) -> "DensePmf":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum(), space)

    @classmethod
    def uniform(cls, space: SpaceConfig) -> "DensePmf":
        space.require_exact()
        return cls(np.full(space.size, 1.0 / space.size), space)

    @classmethod
    def point_mass(cls, space: SpaceConfig, state: Sequence[int] | int) -> "DensePmf":
        space.require_exact()
        idx = state if isinstance(state, (int, np.integer)) else encode(state, space)
        if not 0 <= idx < space.size:
            raise InvalidState(f"index {idx} out of range")
        m = np.zeros(space.size)
        m[idx] = 1.0
        return cls(m, space)

    @classmethod
    def dirichlet(cls, space: SpaceConfig, alpha: float, seed: int) -> "DensePmf":
        space.require_exact()
        rng = np.random.default_rng(seed)
        m = rng.dirichlet(np.full(space.size, float(alpha)))
        # Dirichlet draws with small alpha can underflow to exact zeros; keep full support.
        m = np.maximum(m, 1e-300)
        return cls(m / m.sum(), space)

    def tensor(self) -> np.ndarray:
        """View as an array of shape ``(S,)*d`` whose axis ``i`` is token ``i``."""
        return self.mass.reshape((self.space.S,) * self.space.d, order="F")


def iter_states(space: SpaceConfig) -> Iterable[TokenState]:
    space.require_exact()
    for row in space.states:
        yield tuple(int(v) for v in row)
