"""Run configuration: every knob of the pipeline in one validated place.

Configs load from JSON dicts. Unknown keys are rejected (typos should fail
loudly, not silently fall back to defaults), and ``to_dict`` materializes
every effective value, so the config echoed into a report re-runs the exact
same pipeline.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .energy import EnergyWeights
from .exceptions import ConfigError
from .matching import PreselectConfig
from .solver import SolverConfig


@dataclass
class CameraSection:
    fx: float = 259.2
    fy: float = 259.2
    cx: float = 47.5
    cy: float = 47.5
    width: int = 96
    height: int = 96

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")


@dataclass
class DepthSection:
    z_min: float = 1.0
    z_max: float = 1.0e5

    def __post_init__(self) -> None:
        if not 0.0 <= self.z_min < self.z_max:
            raise ValueError("need 0 <= z_min < z_max")


@dataclass
class SamplingSection:
    radius: float = 7.0  # control-point thinning radius, mm
    connection_sigma: float | None = None  # default 2 * radius
    bind_k: int = 4
    bind_sigma: float | None = None  # default radius

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("sampling radius must be positive")
        if self.bind_k < 1:
            raise ValueError("bind_k must be at least 1")
        if self.connection_sigma is not None and self.connection_sigma <= 0.0:
            raise ValueError("connection_sigma must be positive")
        if self.bind_sigma is not None and self.bind_sigma <= 0.0:
            raise ValueError("bind_sigma must be positive")

    @property
    def effective_connection_sigma(self) -> float:
        return 2.0 * self.radius if self.connection_sigma is None else self.connection_sigma

    @property
    def effective_bind_sigma(self) -> float:
        return self.radius if self.bind_sigma is None else self.bind_sigma


@dataclass
class PreselectSection:
    distance_threshold: float = 5.0
    n_references: int = 30
    n_reweight_iters: int = 10
    inlier_weight_min: float = 0.5
    min_support: float = 0.2


@dataclass
class GatesSection:
    distance_mm: float = 20.0
    angle_deg: float = 60.0

    def __post_init__(self) -> None:
        if self.distance_mm <= 0.0 or not 0.0 < self.angle_deg <= 180.0:
            raise ValueError("gates must be positive (angle within 180 degrees)")


@dataclass
class SolverSection:
    max_outer_iters: int = 10
    lambda_init: float = 1e-3
    lambda_decrease: float = 0.1
    lambda_increase: float = 10.0
    lambda_min: float = 1e-9
    lambda_max: float = 1e9
    max_retries: int = 3
    step_tol: float = 1e-4
    cost_tol: float = 1e-6
    n_chunks: int = 8


@dataclass
class PathsSection:
    template: str | None = None
    frames: str | None = None
    matches: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    camera: CameraSection = field(default_factory=CameraSection)
    depth: DepthSection = field(default_factory=DepthSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    preselect: PreselectSection = field(default_factory=PreselectSection)
    energy: EnergyWeights = field(default_factory=EnergyWeights)
    gates: GatesSection = field(default_factory=GatesSection)
    solver: SolverSection = field(default_factory=SolverSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def make_solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(
            max_outer_iters=s.max_outer_iters,
            lambda_init=s.lambda_init,
            lambda_decrease=s.lambda_decrease,
            lambda_increase=s.lambda_increase,
            lambda_min=s.lambda_min,
            lambda_max=s.lambda_max,
            max_retries=s.max_retries,
            step_tol=s.step_tol,
            cost_tol=s.cost_tol,
            gate_distance=self.gates.distance_mm,
            gate_angle_deg=self.gates.angle_deg,
            n_chunks=s.n_chunks,
            n_threads=self.threads,
        )

    def make_preselect_config(self) -> PreselectConfig:
        p = self.preselect
        return PreselectConfig(
            distance_threshold=p.distance_threshold,
            n_references=p.n_references,
            n_reweight_iters=p.n_reweight_iters,
            inlier_weight_min=p.inlier_weight_min,
            min_support=p.min_support,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        """Every effective value, ready to be embedded in a report."""
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                out[f.name] = dataclasses.asdict(value)
            else:
                out[f.name] = value
        out["sampling"]["connection_sigma"] = self.sampling.effective_connection_sigma
        out["sampling"]["bind_sigma"] = self.sampling.effective_bind_sigma
        return out


_SECTIONS = {
    "camera": CameraSection,
    "depth": DepthSection,
    "sampling": SamplingSection,
    "preselect": PreselectSection,
    "energy": EnergyWeights,
    "gates": GatesSection,
    "solver": SolverSection,
    "paths": PathsSection,
}


def _merge_section(cls, payload, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object, got {type(payload).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(payload: dict, where: str = "config") -> RunConfig:
    """Build a validated RunConfig from a parsed JSON object."""
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object, got {type(payload).__name__}")
    allowed = set(_SECTIONS) | {"seed", "threads"}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in payload:
            kwargs[name] = _merge_section(cls, payload[name], f"{where}.{name}")
    for scalar in ("seed", "threads"):
        if scalar in payload:
            value = payload[scalar]
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}.{scalar}: expected an integer")
            kwargs[scalar] = value
    try:
        config = RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    # exercise the derived configs so bad numbers fail at load time
    try:
        config.make_solver_config()
        config.make_preselect_config()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return config


__all__ = [
    "CameraSection",
    "DepthSection",
    "SamplingSection",
    "PreselectSection",
    "GatesSection",
    "SolverSection",
    "PathsSection",
    "RunConfig",
    "load_config",
]
