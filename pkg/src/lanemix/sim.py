"""Multi-lane straight highway with scripted human drivers and agent vehicles.

Lanes are numbered 1 (leftmost) to ``lane_count`` (rightmost); lane ``L`` has
its center at ``y = (L - 0.5) * lane_width``. One decision tick lasts one
second and is integrated in ``substeps`` forward-Euler steps.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

VEHICLE_LENGTH = 5.0
VEHICLE_WIDTH = 2.0

DENSITY_MODES = {
    "sparse": (2, 8),
    "normal": (3, 15),
    "dense": (5, 30),
}


class MetaAction(IntEnum):
    LANE_LEFT = 0
    IDLE = 1
    LANE_RIGHT = 2
    FASTER = 3
    SLOWER = 4


class Kind:
    AGENT = "agent"
    CONSERVATIVE = "hdv_conservative"
    AGGRESSIVE = "hdv_aggressive"


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class RoadConfig:
    lane_count: int = 6
    road_length: float = 1000.0
    lane_width: float = 4.0

    def __post_init__(self):
        if self.lane_count < 2:
            raise ConfigError("lane_count must be >= 2")
        if self.road_length <= 0 or self.lane_width <= 0:
            raise ConfigError("road_length and lane_width must be positive")

    @property
    def width(self) -> float:
        return self.lane_count * self.lane_width

    def lane_center(self, lane: int) -> float:
        return (lane - 0.5) * self.lane_width

    def lane_of(self, y: float) -> int:
        return int(min(max(math.floor(y / self.lane_width) + 1, 1), self.lane_count))


@dataclass(frozen=True)
class ScenarioConfig:
    density_mode: str = "sparse"
    n_agents: int | None = None
    n_hdv: int | None = None
    aggressive_fraction: float = 0.3
    duration: float = 40.0
    v_min: float = 20.0
    v_max: float = 30.0
    seed: int = 0
    spawn_spacing: float = 25.0
    spawn_jitter: float = 5.0
    substeps: int = 15
    road: RoadConfig = field(default_factory=RoadConfig)
    # weights of the crash, lane and speed reward terms; the crash term R1 is
    # already -1 on a crash, so its weight enters by magnitude
    reward_weights: tuple = (-1.0, 0.1, 0.4)

    def __post_init__(self):
        if self.density_mode in DENSITY_MODES:
            na, nh = DENSITY_MODES[self.density_mode]
            if self.n_agents is None:
                object.__setattr__(self, "n_agents", na)
            if self.n_hdv is None:
                object.__setattr__(self, "n_hdv", nh)
        elif self.n_agents is None or self.n_hdv is None:
            raise ConfigError(f"unknown density mode {self.density_mode!r}")
        if self.n_agents < 1 or self.n_hdv < 0:
            raise ConfigError("need at least one agent and a non-negative HDV count")
        if not 0.0 <= self.aggressive_fraction <= 1.0:
            raise ConfigError("aggressive_fraction must lie in [0, 1]")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if not self.v_min < self.v_max:
            raise ConfigError("v_min must be below v_max")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if self.spawn_jitter * 2 + VEHICLE_LENGTH >= self.spawn_spacing:
            raise ConfigError("spawn jitter too large for spacing; vehicles could overlap")

    @property
    def n_vehicles(self) -> int:
        return self.n_agents + self.n_hdv

    @property
    def max_ticks(self) -> int:
        return int(math.ceil(self.duration - 1e-9))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class BehaviorPreset:
    name: str
    speed_factor: float
    time_headway: float
    max_accel: float
    comfort_decel: float = 2.0
    min_gap: float = 2.0
    delta: float = 4.0
    politeness: float = 0.5
    lane_change_threshold: float = 0.2
    safe_decel: float = 4.0


PRESETS = {
    "conservative": BehaviorPreset("conservative", 1.0, 1.5, 3.0, politeness=0.5,
                                   lane_change_threshold=0.2),
    "aggressive": BehaviorPreset("aggressive", 1.1, 1.0, 4.0, politeness=0.1,
                                 lane_change_threshold=0.1),
}

# low-level control
LATERAL_GAIN = 0.3          # fraction of the lateral error closed per substep
LATERAL_SPEED_MAX = 2.0
LONGITUDINAL_GAIN = 0.5     # 1/s toward target_speed
LANE_SNAP = 0.1
MAX_BRAKE = 9.0


@dataclass
class VehicleState:
    id: int
    kind: str
    lane: int
    x: float
    y: float
    vx: float
    vy: float = 0.0
    target_lane: int = 0
    target_speed: float = 0.0
    crashed: bool = False

    def __post_init__(self):
        if not self.target_lane:
            self.target_lane = self.lane
        if not self.target_speed:
            self.target_speed = self.vx

    @property
    def is_agent(self) -> bool:
        return self.kind == Kind.AGENT

    @property
    def preset(self) -> BehaviorPreset | None:
        if self.kind == Kind.CONSERVATIVE:
            return PRESETS["conservative"]
        if self.kind == Kind.AGGRESSIVE:
            return PRESETS["aggressive"]
        return None

    @property
    def heading(self) -> float:
        return math.atan2(self.vy, self.vx) if (self.vx or self.vy) else 0.0


@dataclass
class StepOutcome:
    rewards: list[float]
    crashed: list[bool]
    global_reward: float
    terminated: bool
    elapsed_steps: int


class AgentTransition(NamedTuple):
    agent_id: int
    action: int
    reward: float
    crashed: bool


# ---------------------------------------------------------------- behaviour


def apply_meta_action(vehicle: VehicleState, action: int, road: RoadConfig,
                      v_min: float, v_max: float) -> VehicleState:
    """Return a copy of ``vehicle`` with targets updated by one meta-action."""
    if vehicle.crashed:
        raise UsageError(f"vehicle {vehicle.id} has crashed")
    action = MetaAction(action)
    out = replace(vehicle)
    if action == MetaAction.LANE_LEFT:
        out.target_lane = max(1, vehicle.target_lane - 1)
    elif action == MetaAction.LANE_RIGHT:
        out.target_lane = min(road.lane_count, vehicle.target_lane + 1)
    elif action == MetaAction.FASTER:
        out.target_speed = min(v_max, vehicle.target_speed + 5.0)
    elif action == MetaAction.SLOWER:
        out.target_speed = max(v_min, vehicle.target_speed - 5.0)
    return out


def idm_acceleration(ego: VehicleState, leader: VehicleState | None,
                     preset: BehaviorPreset | str) -> float:
    """Intelligent Driver Model acceleration of ``ego`` behind ``leader``.

    The desired speed is ``ego.target_speed * preset.speed_factor``.
    """
    if isinstance(preset, str):
        preset = PRESETS[preset]
    v = max(ego.vx, 0.0)
    v0 = max(ego.target_speed * preset.speed_factor, 1e-6)
    acc = 1.0 - (v / v0) ** preset.delta
    if leader is not None:
        gap = max(leader.x - ego.x - VEHICLE_LENGTH, 1e-2)
        dv = v - leader.vx
        s_star = preset.min_gap + max(
            0.0, v * preset.time_headway + v * dv / (2.0 * math.sqrt(preset.max_accel * preset.comfort_decel))
        )
        acc -= (s_star / gap) ** 2
    return preset.max_accel * acc


def _lanes_of(v: VehicleState) -> tuple[int, int]:
    return v.lane, v.target_lane


def find_neighbours(vehicles: Sequence[VehicleState], ego: VehicleState, lane: int,
                    ) -> tuple[VehicleState | None, VehicleState | None]:
    """Nearest leader and follower of ``ego`` occupying ``lane``."""
    leader = follower = None
    best_ahead = best_behind = math.inf
    for v in vehicles:
        if v is ego or v.crashed or lane not in _lanes_of(v):
            continue
        dx = v.x - ego.x
        if dx > 0 and dx < best_ahead:
            best_ahead, leader = dx, v
        elif dx <= 0 and -dx < best_behind:
            best_behind, follower = -dx, v
    return leader, follower


def mobil_lane_change(ego: VehicleState, vehicles: Sequence[VehicleState],
                      road: RoadConfig) -> int:
    """Lane chosen by MOBIL for an HDV; the current lane if no change pays off."""
    preset = ego.preset
    if preset is None or ego.target_lane != ego.lane:
        return ego.target_lane
    old_leader, old_follower = find_neighbours(vehicles, ego, ego.lane)
    a_ego_old = idm_acceleration(ego, old_leader, preset)
    best_lane, best_gain = ego.lane, preset.lane_change_threshold
    for lane in (ego.lane - 1, ego.lane + 1):
        if not 1 <= lane <= road.lane_count:
            continue
        new_leader, new_follower = find_neighbours(vehicles, ego, lane)
        if new_leader is not None and new_leader.x - ego.x < VEHICLE_LENGTH + 1.0:
            continue
        if new_follower is not None and ego.x - new_follower.x < VEHICLE_LENGTH + 1.0:
            continue
        a_nf_old = a_nf_new = 0.0
        if new_follower is not None:
            fp = new_follower.preset or PRESETS["conservative"]
            a_nf_old = idm_acceleration(new_follower, new_leader, fp)
            a_nf_new = idm_acceleration(new_follower, ego, fp)
            if a_nf_new < -preset.safe_decel:
                continue
        a_ego_new = idm_acceleration(ego, new_leader, preset)
        if a_ego_new < -preset.safe_decel:
            continue
        a_of_old = a_of_new = 0.0
        if old_follower is not None:
            fp = old_follower.preset or PRESETS["conservative"]
            a_of_old = idm_acceleration(old_follower, ego, fp)
            a_of_new = idm_acceleration(old_follower, old_leader, fp)
        gain = (a_ego_new - a_ego_old) + preset.politeness * (
            (a_nf_new - a_nf_old) + (a_of_new - a_of_old)
        )
        if gain > best_gain:
            best_lane, best_gain = lane, gain
    return best_lane


# ---------------------------------------------------------------- collisions


def _corners(x: float, y: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = VEHICLE_LENGTH / 2.0, VEHICLE_WIDTH / 2.0
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def rectangles_overlap(a: VehicleState, b: VehicleState) -> bool:
    """Separating-axis test on the two oriented vehicle footprints."""
    ca = _corners(a.x, a.y, a.heading)
    cb = _corners(b.x, b.y, b.heading)
    for heading in (a.heading, b.heading):
        c, s = math.cos(heading), math.sin(heading)
        for axis in ((c, s), (-s, c)):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def detect_collisions(vehicles: Sequence[VehicleState]) -> list[tuple[int, int]]:
    """Index pairs of overlapping vehicles."""
    n = len(vehicles)
    if n < 2:
        return []
    xs = np.array([v.x for v in vehicles])
    ys = np.array([v.y for v in vehicles])
    near = (np.abs(xs[:, None] - xs[None, :]) < VEHICLE_LENGTH + VEHICLE_WIDTH) & (
        np.abs(ys[:, None] - ys[None, :]) < VEHICLE_LENGTH + VEHICLE_WIDTH
    )
    pairs = []
    for i, j in zip(*np.nonzero(np.triu(near, k=1))):
        if rectangles_overlap(vehicles[i], vehicles[j]):
            pairs.append((int(i), int(j)))
    return pairs


# ---------------------------------------------------------------- rewards


def reward(agent: VehicleState, crashed: bool, road: RoadConfig, config: ScenarioConfig) -> float:
    """Crash penalty + rightmost-lane preference + normalized speed bonus."""
    w1, w2, w3 = config.reward_weights
    r1 = -1.0 if crashed else 0.0
    r2 = agent.lane / road.lane_count
    v = min(max(agent.vx, config.v_min), config.v_max)
    r3 = (v - config.v_min) / (config.v_max - config.v_min)
    return abs(w1) * r1 + w2 * r2 + w3 * r3


def global_reward(outcome_or_rewards) -> float:
    rewards = getattr(outcome_or_rewards, "rewards", outcome_or_rewards)
    return float(np.mean(rewards))


# ---------------------------------------------------------------- world


class World:
    """Mutable simulation state. One instance per episode."""

    def __init__(self, config: ScenarioConfig, vehicles: list[VehicleState],
                 rng: np.random.Generator):
        self.config = config
        self.road = config.road
        self.vehicles = vehicles
        self.rng = rng
        self.tick = 0
        self.terminated = False
        self.agent_ids = [v.id for v in vehicles if v.is_agent]

    @property
    def dt(self) -> float:
        return 1.0 / self.config.substeps

    @property
    def time(self) -> float:
        return float(self.tick)

    def vehicle(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)

    @property
    def agents(self) -> list[VehicleState]:
        return [self.vehicle(i) for i in self.agent_ids]

    def snapshot(self) -> "World":
        return copy.deepcopy(self)

    def step(self, joint_action: Sequence[int]) -> StepOutcome:
        if self.terminated:
            raise UsageError("cannot step a terminated world")
        actions = list(getattr(joint_action, "actions", joint_action))
        if len(actions) != len(self.agent_ids):
            raise UsageError(f"expected {len(self.agent_ids)} actions, got {len(actions)}")
        cfg = self.config
        for vid, a in zip(self.agent_ids, actions):
            v = self.vehicle(vid)
            updated = apply_meta_action(v, a, self.road, cfg.v_min, cfg.v_max)
            v.target_lane, v.target_speed = updated.target_lane, updated.target_speed
        for v in self.vehicles:
            if not v.is_agent:
                v.target_lane = mobil_lane_change(v, self.vehicles, self.road)

        agent_crash = False
        for _ in range(cfg.substeps):
            self._integrate()
            agent_crash = self._resolve_collisions()
            if agent_crash:
                break
        self.tick += 1

        agents = self.agents
        crashed = [a.crashed for a in agents]
        rewards = [reward(a, a.crashed, self.road, cfg) for a in agents]
        self.terminated = any(crashed) or self.tick >= cfg.max_ticks
        return StepOutcome(rewards, crashed, global_reward(rewards), self.terminated, self.tick)

    def _integrate(self) -> None:
        dt = self.dt
        accels = []
        for v in self.vehicles:
            if v.is_agent:
                accels.append(LONGITUDINAL_GAIN * (v.target_speed - v.vx))
            else:
                leader = None
                best = math.inf
                for u in self.vehicles:
                    if u is v:
                        continue
                    dx = u.x - v.x
                    if 0 < dx < best and (u.lane in (v.lane, v.target_lane)
                                          or u.target_lane in (v.lane, v.target_lane)):
                        best, leader = dx, u
                a = idm_acceleration(v, leader, v.preset)
                accels.append(min(max(a, -MAX_BRAKE), v.preset.max_accel))
        for v, a in zip(self.vehicles, accels):
            v.vx = max(0.0, v.vx + a * dt)
            v.x += v.vx * dt
            err = self.road.lane_center(v.target_lane) - v.y
            if abs(err) < LANE_SNAP:
                v.y += err
                v.vy = 0.0
            else:
                v.vy = min(max(LATERAL_GAIN * err / dt, -LATERAL_SPEED_MAX), LATERAL_SPEED_MAX)
                v.y += v.vy * dt
                if abs(self.road.lane_center(v.target_lane) - v.y) < LANE_SNAP:
                    v.y = self.road.lane_center(v.target_lane)
                    v.vy = 0.0
            v.y = min(max(v.y, VEHICLE_WIDTH / 2.0), self.road.width - VEHICLE_WIDTH / 2.0)
            v.lane = self.road.lane_of(v.y)

    def _resolve_collisions(self) -> bool:
        pairs = detect_collisions(self.vehicles)
        if not pairs:
            return False
        for i, j in pairs:
            self.vehicles[i].crashed = True
            self.vehicles[j].crashed = True
        agent_crash = any(v.crashed for v in self.vehicles if v.is_agent)
        if not agent_crash:
            self.vehicles = [v for v in self.vehicles if v.is_agent or not v.crashed]
        return agent_crash

    def trace_rows(self) -> list[tuple]:
        return [
            (self.tick, v.id, v.kind, v.lane, round(v.x, 6), round(v.y, 6), round(v.vx, 6), int(v.crashed))
            for v in self.vehicles
        ]


TRACE_COLUMNS = ("tick", "id", "kind", "lane", "x", "y", "vx", "crashed")


def write_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        w.writerows(rows)


def init_scenario(config: ScenarioConfig) -> World:
    """Place agents and HDVs on random lanes at a fixed, jittered spacing."""
    n = config.n_vehicles
    road = config.road
    span = (n - 1) * config.spawn_spacing + config.spawn_jitter + VEHICLE_LENGTH
    if span > road.road_length:
        raise ConfigError(
            f"{n} vehicles at {config.spawn_spacing} m spacing need {span:.0f} m of road"
        )
    rng = np.random.default_rng(config.seed)
    n_aggr = int(round(config.aggressive_fraction * config.n_hdv))
    kinds = [Kind.AGENT] * config.n_agents + [Kind.AGGRESSIVE] * n_aggr + \
        [Kind.CONSERVATIVE] * (config.n_hdv - n_aggr)
    order = rng.permutation(n)
    lanes = rng.integers(1, road.lane_count + 1, size=n)
    jitter = rng.uniform(-config.spawn_jitter, config.spawn_jitter, size=n)
    speeds = rng.uniform(config.v_min, config.v_max, size=n)
    base = config.spawn_jitter + VEHICLE_LENGTH / 2.0
    vehicles = []
    for slot in range(n):
        k = int(order[slot])
        lane = int(lanes[slot])
        vehicles.append(VehicleState(
            id=k,
            kind=kinds[k],
            lane=lane,
            x=float(base + slot * config.spawn_spacing + jitter[slot]),
            y=road.lane_center(lane),
            vx=float(speeds[slot]),
        ))
    vehicles.sort(key=lambda v: v.id)
    return World(config, vehicles, rng)


def step(world: World, joint_action) -> tuple[World, StepOutcome, list[AgentTransition]]:
    actions = list(getattr(joint_action, "actions", joint_action))
    outcome = world.step(actions)
    transitions = [
        AgentTransition(vid, int(a), r, c)
        for vid, a, r, c in zip(world.agent_ids, actions, outcome.rewards, outcome.crashed)
    ]
    return world, outcome, transitions
