"""Per-agent kinematic observations, the stacked global state and position histories.

Feature columns are ``presence, x, y, vx, vy`` (plus ``x_hat, y_hat`` once
intent is fused). Row 0 is the ego vehicle; rows 1..V-1 hold the nearest
vehicles inside the perception radius, closest first.

Normalization, all into [-1, 1]:

* ego x: progress along the road, ``x / road_length``
* ego y: ``2 * y / road_width - 1``
* neighbour x: ``(x - x_ego) / perception``
* neighbour y: ``(y - y_ego) / road_width``
* vx: ``[v_min, v_max] -> [-1, 1]``; vy: divided by half the speed range
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .sim import VehicleState, World

FEATURES = ("presence", "x", "y", "vx", "vy")
N_FEATURES = len(FEATURES)
PRESENCE, X, Y, VX, VY = range(N_FEATURES)


@dataclass(frozen=True)
class ObservationConfig:
    n_observed: int = 5         # V, ego included
    perception: float = 180.0   # P_D in meters
    history: int = 3            # T_P in decision ticks
    horizon: int = 1            # T_F in decision ticks


def observed_vehicles(world: World, agent_id: int, n_observed: int = 5,
                      perception: float = 180.0) -> list[VehicleState]:
    """Ego followed by up to V-1 vehicles within range, nearest first."""
    ego = world.vehicle(agent_id)
    others = []
    for v in world.vehicles:
        if v.id == ego.id:
            continue
        d = float(np.hypot(v.x - ego.x, v.y - ego.y))
        if d <= perception:
            others.append((d, v.id, v))
    others.sort(key=lambda t: (t[0], t[1]))
    return [ego] + [v for _, _, v in others[: n_observed - 1]]


def normalize_speed(vx: float, v_min: float, v_max: float) -> float:
    return float(np.clip(2.0 * (vx - v_min) / (v_max - v_min) - 1.0, -1.0, 1.0))


def observe(world: World, agent_id: int, cfg: ObservationConfig | None = None) -> np.ndarray:
    """V x 5 normalized kinematic observation of one agent."""
    cfg = cfg or ObservationConfig()
    road, sc = world.road, world.config
    obs = np.zeros((cfg.n_observed, N_FEATURES))
    seen = observed_vehicles(world, agent_id, cfg.n_observed, cfg.perception)
    ego = seen[0]
    half_range = (sc.v_max - sc.v_min) / 2.0
    for row, v in enumerate(seen):
        if row == 0:
            x = v.x / road.road_length
            y = 2.0 * v.y / road.width - 1.0
        else:
            x = (v.x - ego.x) / cfg.perception
            y = (v.y - ego.y) / road.width
        obs[row] = (
            1.0,
            x,
            y,
            normalize_speed(v.vx, sc.v_min, sc.v_max),
            v.vy / half_range,
        )
    return np.clip(obs, -1.0, 1.0)


def assemble_state(observations) -> np.ndarray:
    """Row-stack per-agent observations in agent-index order."""
    observations = list(observations)
    if not observations:
        raise ValueError("need at least one observation")
    shapes = {o.shape for o in observations}
    if len(shapes) != 1:
        raise ValueError(f"observations disagree in shape: {sorted(shapes)}")
    return np.vstack(observations)


def split_state(state: np.ndarray, n_agents: int) -> list[np.ndarray]:
    if state.shape[-2] % n_agents:
        raise ValueError(f"state with {state.shape[-2]} rows cannot hold {n_agents} agents")
    v = state.shape[-2] // n_agents
    return [state[..., i * v:(i + 1) * v, :] for i in range(n_agents)]


def check_state(state: np.ndarray, n_agents: int, n_observed: int) -> None:
    if state.shape[0] != n_agents * n_observed:
        raise ValueError(
            f"global state has {state.shape[0]} rows, expected {n_agents} x {n_observed}"
        )


@dataclass(frozen=True)
class Snapshot:
    ids: tuple            # vehicle id per slot, -1 when the slot is empty
    positions: np.ndarray  # V x 2 absolute (x, y)
    presence: np.ndarray   # V of 0/1


class TrajectoryHistory:
    """Ring buffer of the last T_P + 1 observed-set snapshots of one agent."""

    def __init__(self, history: int = 3):
        self.capacity = history + 1
        self._buf: deque[Snapshot] = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i: int) -> Snapshot:
        return self._buf[i]

    def __iter__(self):
        return iter(self._buf)

    def latest(self) -> Snapshot:
        return self._buf[-1]

    def append(self, snap: Snapshot) -> None:
        self._buf.append(snap)


def take_snapshot(world: World, agent_id: int, cfg: ObservationConfig | None = None) -> Snapshot:
    cfg = cfg or ObservationConfig()
    seen = observed_vehicles(world, agent_id, cfg.n_observed, cfg.perception)
    ids = [-1] * cfg.n_observed
    pos = np.zeros((cfg.n_observed, 2))
    pres = np.zeros(cfg.n_observed)
    for i, v in enumerate(seen):
        ids[i] = v.id
        pos[i] = (v.x, v.y)
        pres[i] = 1.0
    return Snapshot(tuple(ids), pos, pres)


def push_history(history: TrajectoryHistory, world: World, agent_id: int,
                 cfg: ObservationConfig | None = None) -> TrajectoryHistory:
    history.append(take_snapshot(world, agent_id, cfg))
    return history
