"""Synthetic driving scenarios, rollout extraction, agent dropout and JSONL I/O.

Each scenario carries a hidden, persistent bias (extra longitudinal
acceleration and lateral drift) that switches on at ``bias_onset``. The bias
shapes the recorded motion but is never written into model inputs, so a
predictor can only discover it through the errors it makes. An optional lead
vehicle holds a fixed headway ahead of the target and slows it down; hiding
that agent turns its influence into one more unexplained bias.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .domain import AgentTrack, Rollout, RolloutConfig, Sample, Scenario, Trajectory

MANEUVERS = ("constant_velocity", "constant_acceleration", "lane_change", "turn")

RolloutDataset = list[Rollout]


class RolloutRejected(ValueError):
    """A scenario cannot supply a full rollout."""


class DatasetFormatError(ValueError):
    """A JSONL dataset line could not be parsed."""


@dataclass(frozen=True)
class GeneratorConfig:
    n_scenarios: int = 100
    duration: int = 23
    dt: float = 0.5
    maneuver_mix: dict = field(default_factory=lambda: {
        "constant_velocity": 0.4, "constant_acceleration": 0.2, "lane_change": 0.2, "turn": 0.2})
    accel_bias_std: float = 0.5  # m/s^2
    lateral_drift_std: float = 0.2  # m/s
    bias_onset: int = 0  # timestep index at which the bias starts acting
    speed_reference_step: int = 6  # timestep at which the drawn speed holds
    n_context: int = 8
    interaction: bool = True
    interaction_gain: float = 2.0  # lead deceleration = gain / headway, m^2/s^2
    lead_probability: float = 0.6
    lead_gap: tuple = (8.0, 30.0)  # m
    field_half_width: float = 100.0  # m, free agents start in this box
    noise_std: float = 0.6  # m, histories only
    speed_range: tuple = (6.0, 14.0)
    substeps: int = 10
    seed: int = 0

    def violations(self, rollout_cfg: RolloutConfig | None = None) -> list[str]:
        out = []
        if self.n_scenarios < 0:
            out.append("n_scenarios must be >= 0")
        if self.dt <= 0:
            out.append("dt must be positive")
        if self.noise_std < 0:
            out.append("noise_std must be >= 0")
        if self.accel_bias_std < 0 or self.lateral_drift_std < 0:
            out.append("bias standard deviations must be >= 0")
        if self.n_context < 0:
            out.append("n_context must be >= 0")
        if self.substeps < 1:
            out.append("substeps must be >= 1")
        if not 0.0 <= self.lead_probability <= 1.0:
            out.append("lead_probability must lie in [0, 1]")
        if len(self.lead_gap) != 2 or not 0 < self.lead_gap[0] <= self.lead_gap[1]:
            out.append("lead_gap must be an increasing positive pair")
        if len(self.speed_range) != 2 or not 0 <= self.speed_range[0] <= self.speed_range[1]:
            out.append("speed_range must be an increasing nonnegative pair")
        unknown = set(self.maneuver_mix) - set(MANEUVERS)
        if unknown:
            out.append(f"unknown maneuvers {sorted(unknown)}")
        if sum(self.maneuver_mix.values()) <= 0 or any(w < 0 for w in self.maneuver_mix.values()):
            out.append("maneuver_mix weights must be nonnegative with a positive sum")
        if rollout_cfg is not None and self.duration < rollout_cfg.required_length:
            out.append(
                f"duration {self.duration} < (T_h+1)+T_f+stride*(R-1) = {rollout_cfg.required_length}")
        return out


@dataclass(frozen=True)
class TargetPlan:
    """Everything that determines the target's motion in one scenario.

    ``speed`` is the nominal speed at ``GeneratorConfig.speed_reference_step``;
    the initial speed is back-computed from it.
    """

    pos: tuple
    heading: float
    speed: float
    maneuver: str = "constant_velocity"
    accel: float = 0.0
    yaw_rate: float = 0.0
    lc_amplitude: float = 0.0
    lc_period: float = 6.0
    lc_phase: float = 0.0
    accel_bias: float = 0.0
    lateral_drift: float = 0.0
    lead_gap: float | None = None  # headway of a co-moving lead vehicle


def _unit(a: float) -> np.ndarray:
    return np.array([math.cos(a), math.sin(a)])


def lead_deceleration(plan: TargetPlan, cfg: GeneratorConfig) -> float:
    if not cfg.interaction or plan.lead_gap is None:
        return 0.0
    return cfg.interaction_gain / max(plan.lead_gap, 1.0)


def initial_speed(plan: TargetPlan, cfg: GeneratorConfig) -> float:
    t_ref = cfg.speed_reference_step * cfg.dt
    biased = max(0.0, t_ref - cfg.bias_onset * cfg.dt)
    v0 = plan.speed - (plan.accel - lead_deceleration(plan, cfg)) * t_ref - plan.accel_bias * biased
    return max(v0, 0.0)


def simulate_target(plan: TargetPlan, cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the target's clean positions and headings over ``cfg.duration`` steps."""
    n_sub = cfg.substeps
    h = cfg.dt / n_sub
    pos = np.array(plan.pos, dtype=np.float64)
    heading, speed = plan.heading, initial_speed(plan, cfg)
    onset = cfg.bias_onset * cfg.dt
    omega_lc = 2 * math.pi / plan.lc_period
    decel = lead_deceleration(plan, cfg)
    out = np.empty((cfg.duration, 2))
    headings = np.empty(cfg.duration)
    out[0], headings[0] = pos, heading
    for step in range(1, cfg.duration):
        for k in range(n_sub):
            t = (step - 1) * cfg.dt + k * h
            biased = t >= onset - 1e-12
            a = plan.accel - decel + (plan.accel_bias if biased else 0.0)
            if speed + a * h < 0:
                a = -speed / h
            lat_v = plan.lateral_drift if biased else 0.0
            if plan.maneuver == "lane_change":
                lat_v += plan.lc_amplitude * omega_lc * math.cos(omega_lc * (t + h / 2) + plan.lc_phase)
            mid = heading + plan.yaw_rate * h / 2
            pos = pos + (speed * h + 0.5 * a * h * h) * _unit(mid) + lat_v * h * _unit(mid + math.pi / 2)
            speed += a * h
            heading += plan.yaw_rate * h
        out[step], headings[step] = pos, heading
    return out, headings


def _context_tracks(rng: np.random.Generator, plan: TargetPlan, truth: np.ndarray,
                    headings: np.ndarray, cfg: GeneratorConfig) -> dict[str, np.ndarray]:
    """Clean context tracks: an optional co-moving lead plus free constant-velocity traffic.

    Free agents start anywhere in a fixed box, independent of the target, so
    their layout says nothing about how long the target has been driving.
    """
    times = np.arange(cfg.duration)[:, None] * cfg.dt
    tracks = {}
    for j in range(cfg.n_context):
        if j == 0 and plan.lead_gap is not None:
            tracks["a00"] = truth + plan.lead_gap * np.stack([np.cos(headings), np.sin(headings)], axis=1)
            continue
        start = rng.uniform(-cfg.field_half_width, cfg.field_half_width, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, 12.0)
        tracks[f"a{j:02d}"] = start + times * speed * _unit(heading)
    return tracks


def _draw_plan(rng: np.random.Generator, cfg: GeneratorConfig) -> TargetPlan:
    names = [m for m in MANEUVERS if cfg.maneuver_mix.get(m, 0) > 0]
    w = np.array([cfg.maneuver_mix[m] for m in names], dtype=np.float64)
    maneuver = names[int(rng.choice(len(names), p=w / w.sum()))]
    plan = dict(
        pos=tuple(rng.uniform(-50.0, 50.0, size=2)),
        heading=float(rng.uniform(-math.pi, math.pi)),
        speed=float(rng.uniform(*cfg.speed_range)),
        maneuver=maneuver,
    )
    if maneuver == "constant_acceleration":
        plan["accel"] = float(rng.uniform(-0.5, 0.5))
    elif maneuver == "turn":
        plan["yaw_rate"] = float(rng.uniform(-0.15, 0.15))
    elif maneuver == "lane_change":
        plan["lc_amplitude"] = float(rng.uniform(1.5, 3.5) * rng.choice([-1.0, 1.0]))
        plan["lc_period"] = float(rng.uniform(4.0, 8.0))
        plan["lc_phase"] = float(rng.uniform(0.0, 2 * math.pi))
    plan["accel_bias"] = float(rng.normal(0.0, cfg.accel_bias_std))
    plan["lateral_drift"] = float(rng.normal(0.0, cfg.lateral_drift_std))
    gap = float(rng.uniform(*cfg.lead_gap))
    if cfg.n_context > 0 and rng.random() < cfg.lead_probability:
        plan["lead_gap"] = gap
    return TargetPlan(**plan)


def build_scenario(scenario_id: str, plan: TargetPlan, rng: np.random.Generator,
                   cfg: GeneratorConfig) -> Scenario:
    """Simulate one scenario from an explicit target plan.

    ``rng`` supplies free agents and observation noise only, so two plans
    differing in their bias share every other random draw.
    """
    truth, headings = simulate_target(plan, cfg)
    context = _context_tracks(rng, plan, truth, headings, cfg)
    noise = rng.normal(0.0, cfg.noise_std, size=(1 + len(context), cfg.duration, 2))
    tracks = {"target": truth + noise[0]}
    for j, (aid, tr) in enumerate(context.items()):
        tracks[aid] = tr + noise[j + 1]
    bias = {"accel_bias": plan.accel_bias, "lateral_drift": plan.lateral_drift,
            "onset": cfg.bias_onset, "maneuver": plan.maneuver, "lead_gap": plan.lead_gap}
    return Scenario(scenario_id, cfg.dt, "target", tracks, truth, bias)


def generate_scenarios(cfg: GeneratorConfig, id_prefix: str = "scn") -> list[Scenario]:
    """Deterministic for a fixed seed; scenario ``i`` uses substream (seed, i)."""
    out = []
    for i in range(cfg.n_scenarios):
        rng = np.random.default_rng([cfg.seed, i])
        plan = _draw_plan(rng, cfg)
        out.append(build_scenario(f"{id_prefix}-{i:06d}", plan, rng, cfg))
    return out


def extract_rollout(scenario: Scenario, cfg: RolloutConfig) -> Rollout:
    """Cut R consecutive samples, ``stride`` steps apart, from the scenario start."""
    need = cfg.required_length
    if scenario.duration < need:
        raise RolloutRejected(
            f"{scenario.scenario_id}: {scenario.duration} tracked steps, need {need} "
            f"((T_h+1)+T_f+stride*(R-1)); short by {need - scenario.duration}")
    dt = scenario.dt
    samples = []
    for r in range(cfg.R):
        t0 = cfg.T_h + r * cfg.stride
        window = slice(t0 - cfg.T_h, t0 + 1)
        target = AgentTrack(scenario.target_id, Trajectory(scenario.tracks[scenario.target_id][window], dt))
        context = tuple(AgentTrack(aid, Trajectory(tr[window], dt))
                        for aid, tr in scenario.tracks.items() if aid != scenario.target_id)
        future = Trajectory(scenario.target_truth[t0 + 1:t0 + 1 + cfg.T_f], dt)
        samples.append(Sample(r + 1, target, context, future))
    return Rollout(scenario.scenario_id, cfg, dt, tuple(samples))


def build_dataset(scenarios: list[Scenario], cfg: RolloutConfig) -> RolloutDataset:
    """Extract rollouts, silently discarding scenarios that are too short."""
    out = []
    for sc in scenarios:
        try:
            out.append(extract_rollout(sc, cfg))
        except RolloutRejected:
            continue
    return out


def _stable_key(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def drop_agents(rollout: Rollout, fraction: float, seed: int) -> Rollout:
    """Hide each non-target agent with probability ``fraction`` in every step.

    The same agents disappear from all samples; futures are left alone since
    the hidden agents still shaped the recorded motion.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    ids = sorted({a.agent_id for s in rollout.samples for a in s.context})
    rng = np.random.default_rng([seed, _stable_key(rollout.scenario_id)])
    draws = rng.random(len(ids))
    dropped = {aid for aid, u in zip(ids, draws) if u < fraction}
    samples = tuple(
        Sample(s.step_index, s.target, tuple(a for a in s.context if a.agent_id not in dropped), s.future)
        for s in rollout.samples)
    return Rollout(rollout.scenario_id, rollout.config, rollout.dt, samples)


# --- JSONL persistence -----------------------------------------------------

def _track_json(track: AgentTrack) -> dict:
    return {"id": track.agent_id, "history": track.history.points.tolist()}


def rollout_to_json(rollout: Rollout) -> dict:
    cfg = asdict(rollout.config)
    cfg["dt"] = rollout.dt
    return {
        "scenario_id": rollout.scenario_id,
        "config": cfg,
        "samples": [
            {"i": s.step_index, "target": _track_json(s.target),
             "context": [_track_json(a) for a in s.context],
             "future": s.future.points.tolist()}
            for s in rollout.samples
        ],
    }


def rollout_from_json(obj: dict) -> Rollout:
    c = dict(obj["config"])
    dt = float(c.pop("dt"))
    cfg = RolloutConfig(**{k: int(v) for k, v in c.items()})

    def track(d):
        return AgentTrack(str(d["id"]), Trajectory(np.array(d["history"], dtype=np.float64), dt))

    samples = tuple(
        Sample(int(s["i"]), track(s["target"]), tuple(track(a) for a in s["context"]),
               Trajectory(np.array(s["future"], dtype=np.float64), dt))
        for s in obj["samples"])
    return Rollout(str(obj["scenario_id"]), cfg, dt, samples)


def write_jsonl(dataset: RolloutDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ro in dataset:
            fh.write(json.dumps(rollout_to_json(ro), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> RolloutDataset:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(rollout_from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{Path(path).name}: line {lineno}: {exc}") from exc
    return out
