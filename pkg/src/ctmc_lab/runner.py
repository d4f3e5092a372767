"""End-to-end experiment execution, parameter sweeps and log-log slope fits."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import forward
from .config import AXES, ExperimentConfig, MonteCarloMode, SweepConfig, load_experiment
from .errors import CTMCLabError, InvalidConfig, InvalidInput
from .metrics import BOUND_SAMPLERS, early_stop_tv, empirical_pmf, kl, kl_bound, tv
from .samplers import run_chain
from .score import eps_score

log = logging.getLogger(__name__)

THREADS_ENV = "CTMC_LAB_THREADS"


def worker_count(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidConfig(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _finite_or_str(v):
    """JSON/CSV friendly scalar: non-finite floats become ``"inf"``, ``"-inf"`` or ``"nan"``."""
    if isinstance(v, float) and not math.isfinite(v):
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    return _finite_or_str(obj)


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    N: int
    final_kl: float
    final_tv: float
    eps_score: float
    early_stop_tv: float
    bound: dict | None = None
    bound_holds: bool | None = None
    steps: list[dict] = field(default_factory=list)
    wall_clock_s: float | None = None

    def record(self) -> dict:
        out = {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "N": self.N,
            "final_kl": self.final_kl,
            "final_tv": self.final_tv,
            "eps_score": self.eps_score,
            "early_stop_tv": self.early_stop_tv,
            "bound": self.bound,
            "bound_holds": self.bound_holds,
            "steps": self.steps,
        }
        if self.wall_clock_s is not None:
            out["wall_clock_s"] = self.wall_clock_s
        return _clean(out)

    def jsonl(self) -> str:
        return json.dumps(self.record(), sort_keys=True, allow_nan=False) + "\n"

    def scalars(self) -> dict:
        """Flat scalar view used for sweep rows."""
        row = {
            "N": self.N,
            "final_kl": self.final_kl,
            "final_tv": self.final_tv,
            "eps_score": self.eps_score,
            "early_stop_tv": self.early_stop_tv,
            "seed": self.seed,
            "bound_holds": self.bound_holds,
        }
        for key in BOUND_KEYS:
            row[key] = None if self.bound is None else self.bound[key]
        return row


BOUND_KEYS = ("lhs_kl", "init_err", "est_err", "disc_err", "rhs_total", "quad_est")


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    """Execute one experiment; sampler failures propagate as :class:`SamplerError`."""
    started = time.perf_counter()
    space = cfg.build_space()
    q0 = cfg.build_q0(space)
    provider = cfg.build_provider(q0)
    sampler = cfg.build_sampler()
    grid = cfg.build_grid()
    target = forward.forward_marginal(q0, grid.delta)

    exact = run_chain(sampler, grid, provider, mode="exact")
    if isinstance(cfg.mode, MonteCarloMode):
        mc = run_chain(sampler, grid, provider, mode="monte-carlo", n=cfg.mode.n, seed=cfg.master_seed, threads=threads)
        final = empirical_pmf(mc.samples, space)
    else:
        final = exact.p_final

    steps = []
    for k, (t_k, p) in enumerate(zip(grid.points, exact.marginals)):
        ref = forward.forward_marginal(q0, grid.T - t_k)
        steps.append({"k": k, "t_k": float(t_k), "kl": kl(ref, p), "tv": tv(ref, p)})

    bound = holds = None
    if cfg.bound.enabled and sampler.kind in BOUND_SAMPLERS:
        rep = kl_bound(
            provider, q0, grid, sampler, cfg.bound.rate_mode, cfg.bound.substeps, marginals=exact.marginals
        )
        bound, holds = rep.record(), rep.holds

    return RunReport(
        config=cfg.canonical(),
        config_hash=cfg.config_hash(),
        seed=cfg.master_seed,
        N=grid.N,
        final_kl=kl(target, final),
        final_tv=tv(target, final),
        eps_score=eps_score(provider, q0, grid),
        early_stop_tv=early_stop_tv(q0, grid.delta),
        bound=bound,
        bound_holds=holds,
        steps=steps,
        wall_clock_s=time.perf_counter() - started if cfg.record_timing else None,
    )


def write_steps_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["k", "t_k", "kl", "tv"], lineterminator="\n")
        w.writeheader()
        for row in report.steps:
            w.writerow({k: _finite_or_str(v) for k, v in row.items()})


def cli_run(cfg: ExperimentConfig, threads: int = 1) -> RunReport:
    report = run_experiment(cfg, threads)
    if cfg.output:
        with open(cfg.output, "w") as fh:
            fh.write(report.jsonl())
    if cfg.steps_csv:
        write_steps_csv(report, cfg.steps_csv)
    return report


# -- sweeps -------------------------------------------------------------


def _apply_axis(data: dict, axis: str, value) -> None:
    if axis in ("kappa", "delta", "T"):
        sched = data["schedule"]
        if axis == "kappa" and sched.get("schedule") != "cted":
            raise InvalidConfig("kappa axis needs a cted schedule")
        sched[axis] = value
    elif axis in ("S", "d"):
        data["space"][axis] = value
    elif axis == "c":
        data["provider"]["perturbation"] = {"kind": "constant", "c": value} if value != 1 else {"kind": "none"}
    elif axis == "sampler":
        data["sampler"]["kind"] = value


def sweep_points(sweep: SweepConfig) -> list[tuple[dict, dict]]:
    """Cross product of the axes; each entry is ``(axis values, raw base config dict)``.

    Axis values are applied when the point runs so that a bad combination
    fails only its own row.  Point ``i`` gets its own seed derived from the
    base master seed.
    """
    base = sweep.base.model_dump(mode="json")
    names = list(sweep.axes)
    points = []
    for i, combo in enumerate(itertools.product(*(sweep.axes[a] for a in names))):
        data = json.loads(json.dumps(base))
        values = dict(zip(names, combo))
        seq = np.random.SeedSequence(sweep.base.master_seed, spawn_key=(i,))
        data["master_seed"] = int(seq.generate_state(1, np.uint32)[0])
        data["output"] = data["steps_csv"] = None
        points.append((values, data))
    return points


SWEEP_SCALARS = (
    "N",
    "bound_holds",
    "disc_err",
    "early_stop_tv",
    "eps_score",
    "est_err",
    "final_kl",
    "final_tv",
    "init_err",
    "lhs_kl",
    "quad_est",
    "rhs_total",
    "seed",
)

SWEEP_COLUMNS = ("config_hash",) + tuple(sorted(set(SWEEP_SCALARS) | set(AXES) | {"error"}, key=str.lower))


def axis_values(cfg: ExperimentConfig) -> dict:
    """The sweepable quantities of a config, so every row describes its own point."""
    pert = cfg.provider.perturbation
    return {
        "kappa": getattr(cfg.schedule, "kappa", None),
        "S": cfg.space.S,
        "d": cfg.space.d,
        "delta": cfg.delta,
        "c": pert.c if pert.kind == "constant" else 1.0,
        "T": cfg.schedule.T,
        "sampler": cfg.sampler.kind,
    }


def _sweep_row(values: dict, data: dict) -> dict:
    row = dict.fromkeys(SWEEP_COLUMNS)
    row.update(values)
    try:
        for axis, value in values.items():
            _apply_axis(data, axis, value)
        cfg = load_experiment(data)
        row["config_hash"] = cfg.config_hash()
        row.update(axis_values(cfg))
        row.update(run_experiment(cfg).scalars())
    except CTMCLabError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def cli_sweep(sweep: SweepConfig, threads: int = 1, out=None) -> list[dict]:
    """Run every point; failures are recorded in-row.  Rows are written in point order."""
    points = sweep_points(sweep)
    rows: list[dict] = []
    sink = out if out is not None else io.StringIO()
    writer = csv.DictWriter(sink, fieldnames=list(SWEEP_COLUMNS), lineterminator="\n")
    writer.writeheader()

    def emit(row):
        rows.append(row)
        writer.writerow({k: _format_cell(v) for k, v in row.items()})

    if threads > 1 and len(points) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for row in pool.map(lambda p: _sweep_row(*p), points):
                emit(row)
    else:
        for p in points:
            emit(_sweep_row(*p))
    return rows


def _format_cell(v) -> Any:
    if isinstance(v, np.generic):
        v = v.item()
    if v is None:
        return ""
    if isinstance(v, float):
        return _finite_or_str(v) if not math.isfinite(v) else repr(v)
    return v


# -- slope fitting ------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float
    used: int
    dropped: int


def fit_loglog(x, y) -> SlopeFit:
    """Least squares of ``log y`` on ``log x`` over finite positive pairs."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d rows with non-positive or non-finite values", dropped)
    if keep.sum() < 3:
        raise InvalidInput(f"slope fit needs at least 3 usable rows, got {int(keep.sum())}")
    lx, ly = np.log(x[keep]), np.log(y[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2, int(keep.sum()), dropped)


def _to_float(cell: str) -> float:
    try:
        return float(cell)
    except (TypeError, ValueError):
        return math.nan


def fit_slope(csv_path, x_col: str, y_col: str) -> SlopeFit:
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for c in (x_col, y_col):
            if c not in cols:
                raise InvalidInput(f"column {c!r} not in {csv_path}")
        rows = list(reader)
    return fit_loglog([_to_float(r[x_col]) for r in rows], [_to_float(r[y_col]) for r in rows])
