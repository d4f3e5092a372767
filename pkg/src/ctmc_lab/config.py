"""Experiment and sweep configuration (JSON), validated with pydantic."""

from __future__ import annotations

import hashlib
import json
import math
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidConfig
from .samplers import SamplerConfig
from .schedule import TimeGrid, cted_grid, uniform_grid
from .score import ExactScoreProvider, PerturbationSpec, ScoreProvider, perturbed_provider
from .state_space import DEFAULT_EXACT_CAP, DensePmf, SpaceConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpaceModel(_Strict):
    S: int = Field(ge=2)
    d: int = Field(ge=1)
    exact_cap: int = Field(DEFAULT_EXACT_CAP, ge=1)


class UniformQ0(_Strict):
    kind: Literal["uniform"]


class PointMassQ0(_Strict):
    kind: Literal["point-mass"]
    index: int = Field(0, ge=0)


class DirichletQ0(_Strict):
    kind: Literal["random-dirichlet"]
    seed: int = 0
    alpha: float = Field(1.0, gt=0)


Q0Model = Annotated[Union[UniformQ0, PointMassQ0, DirichletQ0], Field(discriminator="kind")]


class PerturbationModel(_Strict):
    kind: Literal["none", "constant", "lognormal"] = "none"
    c: float = Field(1.0, gt=0)
    sigma: float = Field(0.0, ge=0)
    seed: int = 0


class ProviderModel(_Strict):
    perturbation: PerturbationModel = PerturbationModel()
    # null means no clipping
    M: Optional[float] = Field(None, ge=1)


class SamplerModel(_Strict):
    kind: Literal["tau-leaping", "euler", "tweedie", "truncated", "kolmogorov-ref"]
    out_of_range_policy: Literal["clamp", "freeze"] = "clamp"
    poisson_truncation_tail: float = Field(1e-12, gt=0, le=1e-6)


class CtedSchedule(_Strict):
    schedule: Literal["cted"]
    T: float = Field(gt=0)
    delta: Optional[float] = Field(None, gt=0)
    kappa: float = Field(gt=0, lt=1)


class UniformSchedule(_Strict):
    schedule: Literal["uniform"]
    T: float = Field(gt=0)
    delta: Optional[float] = Field(None, gt=0)
    N: int = Field(ge=1)


ScheduleModel = Annotated[Union[CtedSchedule, UniformSchedule], Field(discriminator="schedule")]


class ExactMode(_Strict):
    kind: Literal["exact"]


class MonteCarloMode(_Strict):
    kind: Literal["monte-carlo"]
    n: int = Field(ge=1)


ModeModel = Annotated[Union[ExactMode, MonteCarloMode], Field(discriminator="kind")]


class BoundModel(_Strict):
    enabled: bool = True
    rate_mode: Literal["frozen-per-step", "fresh"] = "frozen-per-step"
    substeps: int = Field(16, ge=1)


class ExperimentConfig(_Strict):
    space: SpaceModel
    q0: Q0Model
    provider: ProviderModel = ProviderModel()
    sampler: SamplerModel
    schedule: ScheduleModel
    mode: ModeModel = ExactMode(kind="exact")
    noise_schedule: Literal["constant"] = "constant"
    master_seed: int = 0
    bound: BoundModel = BoundModel()
    output: Optional[str] = None
    steps_csv: Optional[str] = None
    record_timing: bool = False

    @model_validator(mode="after")
    def _check(self):
        T = self.schedule.T
        delta = self.schedule.delta if self.schedule.delta is not None else 1e-3 * T
        if not delta < T:
            raise ValueError("schedule.delta must be smaller than schedule.T")
        n = self.space.S**self.space.d
        if isinstance(self.q0, PointMassQ0) and self.q0.index >= n:
            raise ValueError(f"q0.index {self.q0.index} out of range for S^d = {n}")
        if isinstance(self.mode, ExactMode) and n > self.space.exact_cap:
            raise ValueError(f"exact mode needs S^d = {n} <= exact_cap = {self.space.exact_cap}")
        return self

    # -- builders ---------------------------------------------------------

    def build_space(self) -> SpaceConfig:
        return SpaceConfig(self.space.S, self.space.d, self.space.exact_cap)

    def build_q0(self, space: SpaceConfig | None = None) -> DensePmf:
        space = space or self.build_space()
        if isinstance(self.q0, UniformQ0):
            return DensePmf.uniform(space)
        if isinstance(self.q0, PointMassQ0):
            return DensePmf.point_mass(space, self.q0.index)
        return DensePmf.dirichlet(space, self.q0.alpha, self.q0.seed)

    def build_provider(self, q0: DensePmf) -> ScoreProvider:
        M = math.inf if self.provider.M is None else self.provider.M
        spec = PerturbationSpec(**self.provider.perturbation.model_dump())
        return perturbed_provider(ExactScoreProvider(q0, M), spec)

    def build_sampler(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler.model_dump())

    @property
    def delta(self) -> float:
        return self.schedule.delta if self.schedule.delta is not None else 1e-3 * self.schedule.T

    def build_grid(self) -> TimeGrid:
        s = self.schedule
        if isinstance(s, CtedSchedule):
            return cted_grid(s.T, self.delta, s.kappa)
        return uniform_grid(s.T, self.delta, s.N)

    def canonical(self) -> dict:
        """Config echo without output locations, used for hashing and reports."""
        return self.model_dump(mode="json", exclude={"output", "steps_csv", "record_timing"})

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


AXES = ("kappa", "S", "d", "delta", "c", "T", "sampler")


class SweepConfig(_Strict):
    base: ExperimentConfig
    axes: dict[Literal["kappa", "S", "d", "delta", "c", "T", "sampler"], list] = Field(min_length=1)
    output_csv: Optional[str] = None


def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err["loc"]) or "<root>"


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        lines.append(f"{_field_path(err)}: {err['msg']}")
    return "; ".join(lines)


def load_experiment(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise InvalidConfig(format_validation_error(exc)) from None


def load_sweep(data: dict) -> SweepConfig:
    try:
        return SweepConfig.model_validate(data)
    except ValidationError as exc:
        raise InvalidConfig(format_validation_error(exc)) from None


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise InvalidConfig(f"{path}: {exc.strerror}") from None
