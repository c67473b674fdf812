"""Value types shared across the package.

Coordinates are world-frame meters. Arrays are float64 and treated as
immutable once a value object is built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PROB_TOL = 1e-6


class Waypoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    points: np.ndarray  # [n, 2]
    dt: float = 0.5

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Trajectory) and self.dt == other.dt
                and np.array_equal(self.points, other.points))

    def waypoints(self) -> list[Waypoint]:
        return [Waypoint(float(x), float(y)) for x, y in self.points]


@dataclass(frozen=True)
class AgentTrack:
    agent_id: str
    history: Trajectory  # T_h + 1 points, times -T_h .. 0


@dataclass(frozen=True)
class Sample:
    step_index: int
    target: AgentTrack
    context: tuple[AgentTrack, ...]
    future: Trajectory  # T_f points, times 1 .. T_f


@dataclass(frozen=True)
class RolloutConfig:
    T_h: int = 4
    T_f: int = 12
    R: int = 7
    stride: int = 1
    K: int = 5
    B: int = 6

    def __post_init__(self):
        for name in ("T_h", "T_f", "R", "stride", "K", "B"):
            if getattr(self, name) < 1:
                raise ValueError(f"RolloutConfig.{name} must be positive")

    @property
    def required_length(self) -> int:
        """Tracked timesteps one rollout needs from a scenario."""
        return (self.T_h + 1) + self.T_f + self.stride * (self.R - 1)


@dataclass(frozen=True)
class Rollout:
    scenario_id: str
    config: RolloutConfig
    dt: float
    samples: tuple[Sample, ...]


@dataclass(frozen=True, eq=False)
class PredictionSet:
    modes: np.ndarray  # [K, T_f, 2]
    probs: np.ndarray  # [K]

    def __post_init__(self):
        object.__setattr__(self, "modes", np.asarray(self.modes, dtype=np.float64))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))

    @property
    def K(self) -> int:
        return self.modes.shape[0]

    def best_mode(self) -> np.ndarray:
        return self.modes[int(np.argmax(self.probs))]

    def violations(self, T_f: int | None = None) -> list[str]:
        out = []
        if self.modes.ndim != 3 or self.modes.shape[-1] != 2:
            out.append(f"modes shape {self.modes.shape} is not [K, T_f, 2]")
        elif T_f is not None and self.modes.shape[1] != T_f:
            out.append(f"mode length {self.modes.shape[1]} != T_f {T_f}")
        if self.probs.shape != (self.modes.shape[0],):
            out.append("probs count differs from mode count")
        if np.any(self.probs < 0):
            out.append("negative mode probability")
        if abs(float(self.probs.sum()) - 1.0) > PROB_TOL:
            out.append(f"probs sum to {self.probs.sum():.6f}, not 1")
        if not (np.all(np.isfinite(self.modes)) and np.all(np.isfinite(self.probs))):
            out.append("non-finite prediction values")
        return out


@dataclass(frozen=True, eq=False)
class Scenario:
    scenario_id: str
    dt: float
    target_id: str
    tracks: dict[str, np.ndarray]  # observed (noisy) positions, [duration, 2]
    target_truth: np.ndarray  # clean target positions, [duration, 2]
    bias: dict = field(default_factory=dict)  # generator metadata, never a model input

    @property
    def duration(self) -> int:
        return len(self.target_truth)


def validate_sample(sample: Sample, cfg: RolloutConfig,
                    prediction: PredictionSet | None = None) -> list[str]:
    """Return every invariant violation; an empty list means the sample is fine."""
    out = []
    if len(sample.target.history) != cfg.T_h + 1:
        out.append(f"target history length {len(sample.target.history)} != T_h+1 = {cfg.T_h + 1}")
    if len(sample.future) != cfg.T_f:
        out.append(f"future length {len(sample.future)} != T_f = {cfg.T_f}")
    for ag in sample.context:
        if ag.agent_id == sample.target.agent_id:
            out.append(f"target {ag.agent_id!r} appears in context")
        if len(ag.history) != cfg.T_h + 1:
            out.append(f"context {ag.agent_id!r} history length {len(ag.history)} != {cfg.T_h + 1}")
    trajs = [sample.target.history, sample.future] + [a.history for a in sample.context]
    for tr in trajs:
        if tr.dt <= 0:
            out.append("non-positive dt")
            break
    if not all(np.all(np.isfinite(tr.points)) for tr in trajs):
        out.append("non-finite coordinates")
    if prediction is not None:
        out.extend(prediction.violations(cfg.T_f))
    return out
