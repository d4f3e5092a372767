"""Reverse-time grids ``0 = t_0 < ... < t_N = T - delta``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidGrid

_LAND_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    T: float
    delta: float
    points: np.ndarray
    kind: str
    kappa: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 1:
            raise InvalidGrid("grid needs at least one point")
        if pts[0] != 0.0 or pts[-1] != self.T - self.delta:
            raise InvalidGrid("grid must start at 0 and end at T - delta")
        if np.any(np.diff(pts) <= 0):
            raise InvalidGrid("grid points must be strictly increasing")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return len(self.points) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    def to_dict(self) -> dict:
        out = {"schedule": self.kind, "T": self.T, "delta": self.delta}
        if self.kind == "cted":
            out["kappa"] = self.kappa
        else:
            out["N"] = self.N
        return out


def _check_horizon(T, delta):
    if not (T > 0 and 0 < delta < T) or not math.isfinite(T):
        raise InvalidGrid(f"need T > 0 and 0 < delta < T, got T={T}, delta={delta}")


def uniform_grid(T: float, delta: float, N: int) -> TimeGrid:
    _check_horizon(T, delta)
    if int(N) != N or N < 1:
        raise InvalidGrid(f"uniform grid needs N >= 1, got {N}")
    pts = np.linspace(0.0, T - delta, int(N) + 1)
    pts[-1] = T - delta
    return TimeGrid(T, delta, pts, "uniform")


def cted_grid(T: float, delta: float, kappa: float) -> TimeGrid:
    """Constant-then-exponential-decay steps ``t_{k+1} - t_k = kappa min(1, T - t_k)``.

    The step that would reach or pass ``T - delta`` is shortened to land on it.
    """
    _check_horizon(T, delta)
    if not 0 < kappa < 1:
        raise InvalidGrid(f"kappa must lie in (0, 1), got {kappa}")
    end = T - delta
    pts = [0.0]
    t = 0.0
    while True:
        step = kappa * min(1.0, T - t)
        nxt = t + step
        # keep the stored step within the bound after rounding
        while nxt - t > step:
            nxt = math.nextafter(nxt, t)
        if nxt >= end - _LAND_TOL:
            pts.append(end)
            break
        pts.append(nxt)
        t = nxt
    return TimeGrid(T, delta, np.array(pts), "cted", kappa)


def step_count_reference(T: float, delta: float, kappa: float) -> float:
    return (T + math.log(1.0 / delta)) / kappa


def step_count_scaling(T: float, delta: float, kappa: float, C: float = 3.0) -> tuple[int, float]:
    grid = cted_grid(T, delta, kappa)
    ref = step_count_reference(T, delta, kappa)
    if grid.N > C * ref:
        raise AssertionError(f"N={grid.N} exceeds {C} x reference {ref:.4g}")
    return grid.N, ref


def weighted_step_sum(grid: TimeGrid) -> float:
    """``sum_k max(1, (T - t_{k+1})^-2) (t_{k+1} - t_k)^2``, the discretization budget."""
    pts = grid.points
    rem = grid.T - pts[1:]
    return float(np.sum(np.maximum(1.0, rem**-2.0) * np.diff(pts) ** 2))
