"""Deterministic-step reverse samplers.

Every sampler is available in two forms:

* exact: the per-token categorical of the next state for *every* state of the
  enumerated space, shape ``(S^d, d, S)``; the full step kernel is the product
  over dimensions (dimensions update independently given ``x_{t_k}``);
* Monte-Carlo: a batched step that moves an ``(m, d)`` array of states.

Times ``t`` are reverse times; the provider is queried at forward time
``T - t_k``.  The estimated rate on the grid is ``H(x, y) = s_{T-t_k}(y, x) / S``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import (
    InvalidConfig,
    InvalidTime,
    NegativeMass,
    SamplerError,
    StepTooLarge,
    TruncationOverflow,
)
from .forward import signed_token_kernel, token_kernel
from .linalg import expm
from .score import ScoreProvider
from .state_space import DensePmf, SpaceConfig, decode, encode, hamming

SAMPLER_KINDS = ("tau-leaping", "euler", "tweedie", "truncated", "kolmogorov-ref")
POLICIES = ("clamp", "freeze")

# Rounding slack for probabilities that are mathematically >= 0 but computed as 1 - sum.
ROUND_TOL = 1e-13
_MAX_POISSON_COUNT = 100_000


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    out_of_range_policy: str = "clamp"
    poisson_truncation_tail: float = 1e-12

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise InvalidConfig(f"unknown sampler kind {self.kind!r}; expected one of {SAMPLER_KINDS}")
        if self.out_of_range_policy not in POLICIES:
            raise InvalidConfig(f"out_of_range_policy must be one of {POLICIES}")
        if not 0 < self.poisson_truncation_tail <= 1e-6:
            raise InvalidConfig("poisson_truncation_tail must lie in (0, 1e-6]")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "out_of_range_policy": self.out_of_range_policy,
            "poisson_truncation_tail": self.poisson_truncation_tail,
        }


@dataclass(frozen=True, eq=False)
class StepKernel:
    matrix: np.ndarray
    from_time: float
    to_time: float
    sampler: str

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("step kernel must be square")
        if m.min() < 0 or np.abs(m.sum(axis=1) - 1).max() > 1e-10:
            raise ValueError("step kernel rows must be probability vectors")


# ---------------------------------------------------------------------------
# rates


def rate_table(provider: ScoreProvider, t_k: float, T: float) -> np.ndarray:
    """Estimated off-diagonal rates ``H[x, i, a]`` at grid time ``t_k``; zero where ``a == x^i``."""
    if not 0 <= t_k < T:
        raise InvalidTime(f"grid time must lie in [0, T), got {t_k}")
    H = provider.table(T - t_k) / provider.space.S
    H[provider.space.self_mask] = 0.0
    return H


def estimated_rate(provider: ScoreProvider, t_k: float, T: float, x, y) -> float:
    space = provider.space
    x, y = space.check(x), space.check(y)
    h = hamming(x, y)
    if h >= 2:
        return 0.0
    H = rate_table(provider, t_k, T)[encode(x, space)]
    if h == 0:
        return -float(H.sum())
    i = next(j for j in range(space.d) if x[j] != y[j])
    return float(H[i, y[i]])


def generator_matrix(H: np.ndarray, space: SpaceConfig) -> np.ndarray:
    """Dense ``S^d x S^d`` generator from an off-diagonal rate table."""
    n = space.size
    G = np.zeros((n, n))
    rows = np.broadcast_to(np.arange(n)[:, None, None], H.shape)
    mask = ~space.self_mask
    np.add.at(G, (rows[mask], space.neighbor_index[mask]), H[mask])
    G[np.arange(n), np.arange(n)] = -H.sum(axis=(1, 2))
    return G


# ---------------------------------------------------------------------------
# per-token categoricals


def _state_of(row_states: np.ndarray, r) -> tuple:
    return tuple(int(v) for v in row_states[int(r)])


def euler_rows(H: np.ndarray, dt: float, self_mask: np.ndarray, row_states: np.ndarray) -> np.ndarray:
    """Euler: move to ``a`` w.p. ``H(a) dt``, stay w.p. ``1 - sum_a H(a) dt``."""
    P = H * dt
    stay = 1.0 - P.sum(axis=2)
    bad = np.argwhere(stay < -ROUND_TOL)
    if bad.size:
        r, i = bad[0]
        raise StepTooLarge(
            f"Euler stay probability {stay[r, i]:.6g} < 0 in dimension {i} (dt={dt})",
            state=_state_of(row_states, r),
        )
    P[self_mask] = np.maximum(stay, 0.0).reshape(-1)
    return P


def truncated_rows(H: np.ndarray, dt: float, self_mask: np.ndarray, row_states=None) -> np.ndarray:
    """Truncated tau-leaping: at most one jump per dimension, drawn from the frozen token rate."""
    rho = H.sum(axis=2)
    stay = np.exp(-rho * dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(rho[..., None] > 0, H / np.where(rho > 0, rho, 1.0)[..., None], 0.0)
    P = frac * (-np.expm1(-rho * dt))[..., None]
    P[self_mask] = stay.reshape(-1)
    return P


def tweedie_rows(scores: np.ndarray, dt: float, self_mask: np.ndarray, row_states: np.ndarray) -> np.ndarray:
    """Tweedie tau-leaping: ``P(a) = (exp(-dt R_base) s)(a) * exp(dt R_base)[a, x^i]``."""
    S = scores.shape[-1]
    back = signed_token_kernel(-dt, S)
    fwd = token_kernel(dt, S).matrix()
    v = scores @ back.T
    P = v * fwd[:, row_states].transpose(1, 2, 0)
    P[self_mask] = 0.0
    neg = np.argwhere(P < -ROUND_TOL)
    if neg.size:
        r, i, a = neg[0]
        raise NegativeMass(
            f"Tweedie probability {P[r, i, a]:.6g} < 0 for token {a} in dimension {i}",
            state=_state_of(row_states, r),
        )
    P = np.maximum(P, 0.0)
    moved = P.sum(axis=2)
    bad = np.argwhere(moved > 1.0 + ROUND_TOL)
    if bad.size:
        r, i = bad[0]
        raise StepTooLarge(
            f"Tweedie move mass {moved[r, i]:.6g} > 1 in dimension {i} (dt={dt})",
            state=_state_of(row_states, r),
        )
    P[self_mask] = np.maximum(1.0 - moved, 0.0).reshape(-1)
    return P


def _poisson_pmf(mu: float, eps: float) -> np.ndarray:
    """Poisson pmf on ``0..K`` with ``P(N > K) < eps``."""
    if mu == 0:
        return np.ones(1)
    if mu > 700:
        raise TruncationOverflow(f"Poisson mean {mu:.4g} too large for exact enumeration")
    K = int(stats.poisson.isf(eps, mu)) + 1
    while stats.poisson.sf(K, mu) >= eps:
        K += 1
        if K > _MAX_POISSON_COUNT:
            raise TruncationOverflow(f"Poisson mean {mu:.4g} needs more than {_MAX_POISSON_COUNT} counts")
    return stats.poisson.pmf(np.arange(K + 1), mu)


def tau_leaping_token_row(
    lam: np.ndarray, xi: int, dt: float, policy: str = "clamp", tail: float = 1e-12
) -> np.ndarray:
    """Exact law of one token after a tau-leaping step.

    ``lam[a]`` is the rate towards token ``a`` (``lam[xi]`` ignored).  The raw
    update ``xi + sum_a (a - xi) N_a`` with ``N_a ~ Pois(lam[a] dt)`` is
    enumerated by convolving the displacement laws; mass beyond the truncation
    tail goes to the stay outcome.
    """
    S = lam.shape[0]
    active = [a for a in range(S) if a != xi and lam[a] * dt > 0]
    eps = tail / max(len(active), 1)
    disp = np.ones(1)
    lo = 0
    for a in active:
        pmf = _poisson_pmf(float(lam[a] * dt), eps)
        step = a - xi
        spread = np.zeros(abs(step) * (len(pmf) - 1) + 1)
        spread[:: abs(step)] = pmf
        if step < 0:
            spread = spread[::-1]
            lo += step * (len(pmf) - 1)
        disp = np.convolve(disp, spread)
    values = xi + lo + np.arange(len(disp))
    row = np.zeros(S)
    inside = (values >= 0) & (values < S)
    np.add.at(row, values[inside], disp[inside])
    if policy == "clamp":
        row[0] += disp[values < 0].sum()
        row[S - 1] += disp[values >= S].sum()
    elif policy == "freeze":
        row[xi] += disp[~inside].sum()
    else:
        raise InvalidConfig(f"unknown out-of-range policy {policy!r}")
    residual = 1.0 - row.sum()
    row[xi] += max(residual, 0.0)
    return row / row.sum()


def tau_leaping_rows(H, dt, space, policy="clamp", tail=1e-12) -> np.ndarray:
    P = np.empty_like(H)
    st = space.states
    for x in range(space.size):
        for i in range(space.d):
            P[x, i] = tau_leaping_token_row(H[x, i], int(st[x, i]), dt, policy, tail)
    return P


def token_rows(
    config: SamplerConfig, t_k: float, t_next: float, provider: ScoreProvider, T: float
) -> np.ndarray:
    """Per-token next-state laws ``P[x, i, a]`` for every state (not for ``kolmogorov-ref``)."""
    if t_next < t_k:
        raise InvalidTime("step must move forward in reverse time")
    space = provider.space
    dt = t_next - t_k
    if dt == 0:
        return space.self_mask.astype(np.float64)
    if config.kind == "tweedie":
        return tweedie_rows(np.array(provider.table(T - t_k)), dt, space.self_mask, space.states)
    H = rate_table(provider, t_k, T)
    if config.kind == "euler":
        return euler_rows(H, dt, space.self_mask, space.states)
    if config.kind == "truncated":
        return truncated_rows(H, dt, space.self_mask)
    if config.kind == "tau-leaping":
        return tau_leaping_rows(H, dt, space, config.out_of_range_policy, config.poisson_truncation_tail)
    raise InvalidConfig(f"{config.kind!r} has no per-token factorization")


def kernel_from_token_rows(P: np.ndarray, space: SpaceConfig) -> np.ndarray:
    """``K[x, y] = prod_i P[x, i, y^i]``."""
    st = space.states
    K = np.ones((space.size, space.size))
    for i in range(space.d):
        K *= P[:, i, :][:, st[:, i]]
    return K


def kolmogorov_reference_step_kernel(
    t_k: float, t_next: float, provider: ScoreProvider, T: float
) -> StepKernel:
    """``exp(dt H_{t_k})`` for the frozen estimated generator on the full space."""
    space = provider.space
    space.require_exact()
    dt = t_next - t_k
    if dt < 0:
        raise InvalidTime("step must move forward in reverse time")
    if dt == 0:
        return StepKernel(np.eye(space.size), t_k, t_next, "kolmogorov-ref")
    G = generator_matrix(rate_table(provider, t_k, T), space)
    K = np.maximum(expm(dt * G), 0.0)
    K /= K.sum(axis=1, keepdims=True)
    return StepKernel(K, t_k, t_next, "kolmogorov-ref")


def step_kernel(
    config: SamplerConfig, t_k: float, t_next: float, provider: ScoreProvider, T: float
) -> StepKernel:
    provider.space.require_exact()
    if config.kind == "kolmogorov-ref":
        return kolmogorov_reference_step_kernel(t_k, t_next, provider, T)
    P = token_rows(config, t_k, t_next, provider, T)
    return StepKernel(kernel_from_token_rows(P, provider.space), t_k, t_next, config.kind)


def sampler_step_kernel(
    config: SamplerConfig, x: Sequence[int], t_k: float, t_next: float, provider: ScoreProvider, T: float
) -> np.ndarray:
    """Row of the exact step kernel for state ``x``."""
    space = provider.space
    xi = encode(x, space)
    if config.kind == "kolmogorov-ref":
        return kolmogorov_reference_step_kernel(t_k, t_next, provider, T).matrix[xi]
    P = token_rows(config, t_k, t_next, provider, T)
    return kernel_from_token_rows(P[xi : xi + 1], space)[0]


def tau_leaping_exact_token_kernel(
    x, i: int, t_k: float, t_next: float, provider: ScoreProvider, T: float,
    policy: str = "clamp", tail: float = 1e-12,
) -> np.ndarray:
    space = provider.space
    x = space.check(x)
    H = rate_table(provider, t_k, T)[encode(x, space), i]
    return tau_leaping_token_row(H, x[i], t_next - t_k, policy, tail)


# ---------------------------------------------------------------------------
# Monte-Carlo stepping


def _categorical(P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(P, axis=-1)
    u = rng.random(P.shape[:-1])[..., None] * cum[..., -1:]
    return np.minimum((cum <= u).sum(axis=-1), P.shape[-1] - 1)


def _indices(X: np.ndarray, space: SpaceConfig) -> np.ndarray:
    return X @ space.radix


def step_batch(
    config: SamplerConfig,
    X: np.ndarray,
    t_k: float,
    t_next: float,
    provider: ScoreProvider,
    T: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Advance a batch of states ``X`` (shape ``(m, d)``) by one sampler step."""
    space = provider.space
    X = np.asarray(X, dtype=np.int64)
    dt = t_next - t_k
    if dt == 0:
        return X.copy()
    idx = _indices(X, space)
    if config.kind == "kolmogorov-ref":
        K = kolmogorov_reference_step_kernel(t_k, t_next, provider, T).matrix
        nxt = _categorical(K[idx], rng)
        return space.states[nxt].copy()
    if config.kind == "tau-leaping":
        H = rate_table(provider, t_k, T)[idx]
        counts = rng.poisson(H * dt)
        disp = ((np.arange(space.S)[None, None, :] - X[:, :, None]) * counts).sum(axis=2)
        raw = X + disp
        if config.out_of_range_policy == "clamp":
            return np.clip(raw, 0, space.S - 1)
        return np.where((raw >= 0) & (raw < space.S), raw, X)
    # categorical samplers: build only the rows the batch needs
    sub_mask = space.self_mask[idx]
    if config.kind == "tweedie":
        P = tweedie_rows(np.array(provider.table(T - t_k))[idx], dt, sub_mask, X)
    elif config.kind == "euler":
        P = euler_rows(rate_table(provider, t_k, T)[idx], dt, sub_mask, X)
    else:
        P = truncated_rows(rate_table(provider, t_k, T)[idx], dt, sub_mask)
    return _categorical(P, rng)


def _single(config, x, t_k, t_next, provider, T, rng):
    space = provider.space
    x = space.check(x)
    out = step_batch(config, np.array([x]), t_k, t_next, provider, T, rng)
    return tuple(int(v) for v in out[0])


def tau_leaping_step(x, t_k, t_next, provider, rng, T, policy="clamp"):
    return _single(SamplerConfig("tau-leaping", policy), x, t_k, t_next, provider, T, rng)


def euler_step(x, t_k, t_next, provider, rng, T):
    return _single(SamplerConfig("euler"), x, t_k, t_next, provider, T, rng)


def tweedie_step(x, t_k, t_next, provider, rng, T):
    return _single(SamplerConfig("tweedie"), x, t_k, t_next, provider, T, rng)


def truncated_tau_leaping_step(x, t_k, t_next, provider, rng, T):
    return _single(SamplerConfig("truncated"), x, t_k, t_next, provider, T, rng)


# ---------------------------------------------------------------------------
# chains

MC_BLOCK = 4096


@dataclass(eq=False)
class ChainResult:
    """Output of :func:`run_chain`.

    Exact mode fills ``marginals`` (``p_{t_0}, ..., p_{t_N}``); Monte-Carlo mode
    fills ``samples`` with an ``(n, d)`` array of final states.
    """

    config: SamplerConfig
    marginals: list[DensePmf] | None = None
    samples: np.ndarray | None = None

    @property
    def p_final(self) -> DensePmf:
        return self.marginals[-1]


def block_rng(master_seed: int, block: int) -> np.random.Generator:
    """RNG stream owned by trajectory block ``block``; independent of thread scheduling."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(block,)))


def _run_block(config, grid, provider, seed, block, size):
    space = provider.space
    rng = block_rng(seed, block)
    X = space.states[rng.integers(0, space.size, size=size)].copy()
    pts = grid.points
    for k in range(grid.N):
        try:
            X = step_batch(config, X, pts[k], pts[k + 1], provider, grid.T, rng)
        except SamplerError as err:
            err.step = k
            raise
    return X


def run_chain(
    config: SamplerConfig,
    grid,
    provider: ScoreProvider,
    mode: str = "exact",
    n: int | None = None,
    seed: int = 0,
    threads: int = 1,
) -> ChainResult:
    """Run the sampler from ``p_0 = Uniform`` across every step of ``grid``.

    ``mode="exact"`` composes exact step kernels; ``mode="monte-carlo"`` draws
    ``n`` trajectories in blocks of ``MC_BLOCK``, each block with its own stream.
    """
    space = provider.space
    space.require_exact()
    if mode == "exact":
        p = DensePmf.uniform(space)
        out = [p]
        pts = grid.points
        for k in range(grid.N):
            try:
                K = step_kernel(config, pts[k], pts[k + 1], provider, grid.T).matrix
            except SamplerError as err:
                err.step = k
                raise
            m = np.maximum(p.mass @ K, 0.0)
            p = DensePmf(m / m.sum(), space)
            out.append(p)
        return ChainResult(config, marginals=out)
    if mode != "monte-carlo":
        raise InvalidConfig(f"unknown chain mode {mode!r}")
    if n is None or n < 1:
        raise InvalidConfig("monte-carlo mode needs n >= 1")
    sizes = [min(MC_BLOCK, n - b * MC_BLOCK) for b in range(math.ceil(n / MC_BLOCK))]
    jobs = [(config, grid, provider, seed, b, sz) for b, sz in enumerate(sizes)]
    if threads > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(lambda job: _run_block(*job), jobs))
    else:
        blocks = [_run_block(*job) for job in jobs]
    return ChainResult(config, samples=np.concatenate(blocks, axis=0))
