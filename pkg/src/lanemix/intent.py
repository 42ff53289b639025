"""Trajectory predictor used to give agents a guess of where neighbours go next.

Per history tick the observed vehicles form an ego-centred graph. Two GCN
layers embed each node; a dense layer mixes that embedding with the node's own
coordinates. A GRU shared across nodes runs over the ticks of each node, and a
final dense layer maps every node's last state to a displacement that is added
to its newest position, V x 2 outputs in total.

Positions are ego-relative to the ego position at the newest history tick,
with x scaled by the perception radius and y by the road width.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .observation import (ObservationConfig, Snapshot, TrajectoryHistory, push_history,
                          take_snapshot)
from .sim import MetaAction, RoadConfig, ScenarioConfig, init_scenario

log = logging.getLogger(__name__)

PREDICTION_CLIP = 2.0
ARCHITECTURE = "intent-gcn-gru"


@dataclass
class TrajectorySample:
    inputs: np.ndarray    # T_P x V x 2
    presence: np.ndarray  # T_P x V
    target: np.ndarray    # V x 2
    mask: np.ndarray      # V, 1 where the target is valid


def init_predictor(n_observed: int = 5, history: int = 3, hidden: int = 256,
                   seed: int = 0) -> ad.ParameterSet:
    rng = np.random.default_rng(seed)
    h = hidden
    p = ad.ParameterSet(ARCHITECTURE, seed,
                        meta={"n_observed": n_observed, "history": history, "hidden": hidden})
    p.add("gcn1_w", ad.he_uniform(rng, 2, (2, h)))
    p.add("gcn1_b", np.zeros(h))
    p.add("gcn2_w", ad.he_uniform(rng, h, (h, h)))
    p.add("gcn2_b", np.zeros(h))
    # FC1 sees the GCN output plus the node's own coordinates
    p.add("fc1_w", ad.he_uniform(rng, h + 2, (h + 2, h)))
    p.add("fc1_b", np.zeros(h))
    lim = 1.0 / np.sqrt(h)
    p.add("gru_wx", rng.uniform(-lim, lim, (h, 3 * h)))
    p.add("gru_wh", rng.uniform(-lim, lim, (h, 3 * h)))
    p.add("gru_bx", np.zeros(3 * h))
    p.add("gru_bh", np.zeros(3 * h))
    p.add("fc2_w", rng.uniform(-lim, lim, (h, 2)))
    p.add("fc2_b", np.zeros(2))
    return p


def predictor_forward(params: ad.ParameterSet, inputs: np.ndarray,
                      presence: np.ndarray) -> ad.Tensor:
    """(B, T, V, 2) positions + (B, T, V) presence -> (B, V, 2) predictions."""
    inputs = np.asarray(inputs, dtype=np.float64)
    presence = np.asarray(presence, dtype=np.float64)
    if inputs.ndim != 4 or inputs.shape[-1] != 2 or presence.shape != inputs.shape[:-1]:
        raise ValueError(f"bad predictor input shapes {inputs.shape} / {presence.shape}")
    b, t, v, _ = inputs.shape
    if v != params.meta["n_observed"]:
        raise ValueError(f"predictor built for {params.meta['n_observed']} slots, got {v}")
    hidden = params["fc1_w"].shape[1]
    x = inputs * presence[..., None]
    adj = ad.normalized_adjacency(presence)
    h = ad.gcn_forward(adj, x, params["gcn1_w"], params["gcn1_b"], "relu")
    h = ad.gcn_forward(adj, h, params["gcn2_w"], params["gcn2_b"], "relu")
    h = ad.concat([h, ad.Tensor(x)], axis=-1)
    h = ad.fc_forward(h, params["fc1_w"], params["fc1_b"], "relu")
    # (B, T, V, H) -> (B*V, T, H): one sequence per node
    seq = ad.reshape(ad.transpose(h, (0, 2, 1, 3)), (b * v, t, hidden))
    state = ad.gru_forward(seq, params["gru_wx"], params["gru_wh"],
                           params["gru_bx"], params["gru_bh"])
    delta = ad.reshape(ad.fc_forward(state, params["fc2_w"], params["fc2_b"], None), (b, v, 2))
    # residual on the newest position: the head learns displacement
    return ad.add(delta, ad.Tensor(x[:, -1]))


def masked_mse(pred: ad.Tensor, target: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """Mean squared error over coordinates of valid slots only."""
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], target.shape)
    diff = ad.mul(ad.sub(pred, np.where(m > 0, target, 0.0)), m)
    return ad.scale(ad.sum_all(ad.square(diff)), 1.0 / max(m.sum(), 1.0))


# ---------------------------------------------------------------- history -> input


def history_inputs(history: TrajectoryHistory, road: RoadConfig, perception: float,
                   steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Build one predictor input from a history; slots follow the newest snapshot.

    Missing early ticks repeat the earliest snapshot. Returns (T, V, 2)
    positions, (T, V) presence and the current presence (V,).
    """
    if len(history) == 0:
        raise ValueError("history is empty")
    snaps = list(history)[-steps:]
    snaps = [snaps[0]] * (steps - len(snaps)) + snaps
    return snapshots_to_input(snaps, road, perception)


def snapshots_to_input(snaps: list[Snapshot], road: RoadConfig, perception: float):
    current = snaps[-1]
    v = len(current.ids)
    origin = current.positions[0]
    scale = np.array([perception, road.width])
    pos = np.zeros((len(snaps), v, 2))
    pres = np.zeros((len(snaps), v))
    for t, snap in enumerate(snaps):
        lookup = {vid: i for i, vid in enumerate(snap.ids) if vid >= 0}
        for slot, vid in enumerate(current.ids):
            if vid < 0 or vid not in lookup:
                continue
            pos[t, slot] = (snap.positions[lookup[vid]] - origin) / scale
            pres[t, slot] = 1.0
    return pos, pres, current.presence.copy()


def predict(history: TrajectoryHistory, params: ad.ParameterSet, road: RoadConfig,
            perception: float = 180.0) -> np.ndarray:
    """V x 2 predicted normalized positions at the horizon; absent slots are zero."""
    steps = params.meta["history"]
    pos, pres, current = history_inputs(history, road, perception, steps)
    return predict_batch(params, pos[None], pres[None], current[None])[0]


def predict_batch(params: ad.ParameterSet, pos: np.ndarray, pres: np.ndarray,
                  current: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        out = predictor_forward(params, pos, pres).data
    out = np.clip(out, -PREDICTION_CLIP, PREDICTION_CLIP)
    return out * (current[..., None] > 0.5)


def fuse_intent(obs: np.ndarray, prediction: np.ndarray | None) -> np.ndarray:
    """Append predicted positions as two extra feature columns."""
    if prediction is None:
        return obs
    if obs.ndim != 2 or prediction.shape != (obs.shape[0], 2):
        raise ValueError(f"cannot fuse prediction {prediction.shape} into obs {obs.shape}")
    out = np.concatenate([obs, prediction], axis=1)
    return out * (obs[:, :1] > 0.5)


# ---------------------------------------------------------------- data


def windows_from_episode(snapshots: list[Snapshot], world_positions: list[dict],
                         crash_ticks: set[int], road: RoadConfig, perception: float,
                         history: int, horizon: int) -> list[TrajectorySample]:
    """Sliding (history, horizon) windows over one agent's per-tick snapshots.

    A window ends at tick ``t`` and targets ``t + horizon``; the first window
    ends at ``t = history`` so an episode of K ticks gives K - history - horizon
    windows. Windows touching a crash tick are dropped.
    """
    out = []
    k = len(snapshots)
    for t in range(history, k - horizon):
        if any(c in crash_ticks for c in range(t - history + 1, t + horizon + 1)):
            continue
        pos, pres, current = snapshots_to_input(snapshots[t - history + 1:t + 1], road, perception)
        origin = snapshots[t].positions[0]
        scale = np.array([perception, road.width])
        target = np.zeros((len(current), 2))
        mask = np.zeros(len(current))
        future = world_positions[t + horizon]
        for slot, vid in enumerate(snapshots[t].ids):
            if vid >= 0 and vid in future:
                target[slot] = (np.asarray(future[vid]) - origin) / scale
                mask[slot] = 1.0
        out.append(TrajectorySample(pos, pres, target, mask))
    return out


def collect_dataset(scenario: ScenarioConfig, episodes: int, obs_cfg: ObservationConfig | None = None,
                    policy: str = "random", seed: int = 0) -> list[TrajectorySample]:
    """Roll out scripted episodes and cut them into supervised windows."""
    obs_cfg = obs_cfg or ObservationConfig()
    rng = np.random.default_rng(seed)
    samples: list[TrajectorySample] = []
    for ep in range(episodes):
        world = init_scenario(scenario.with_seed(int(rng.integers(2**31))))
        snaps = {a: [] for a in world.agent_ids}
        positions, crash_ticks = [], set()
        n_vehicles = len(world.vehicles)
        # one snapshot per decision tick; the terminal state only serves as a target
        while True:
            positions.append({v.id: (v.x, v.y) for v in world.vehicles})
            if world.terminated:
                break
            for a in world.agent_ids:
                snaps[a].append(take_snapshot(world, a, obs_cfg))
            if policy == "random":
                actions = rng.integers(0, len(MetaAction), size=len(world.agent_ids))
            else:
                actions = [MetaAction.IDLE] * len(world.agent_ids)
            world.step(actions)
            if len(world.vehicles) < n_vehicles or any(v.crashed for v in world.vehicles):
                crash_ticks.add(world.tick)
                n_vehicles = len(world.vehicles)
        for a in world.agent_ids:
            samples += windows_from_episode(snaps[a], positions, crash_ticks, scenario.road,
                                            obs_cfg.perception, obs_cfg.history, obs_cfg.horizon)
    return samples


def synthetic_constant_velocity(n: int, n_observed: int = 5, history: int = 3,
                                horizon: int = 1, seed: int = 0) -> list[TrajectorySample]:
    """Vehicles moving at constant velocity in normalized, ego-relative units.

    The target is the exact linear extrapolation ``p + v * horizon`` from the
    newest history tick.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        count = int(rng.integers(1, n_observed + 1))
        pres = np.zeros(n_observed)
        pres[:count] = 1.0
        p_now = np.column_stack([rng.uniform(-0.8, 0.8, n_observed),
                                 rng.uniform(-0.8, 0.8, n_observed)])
        vel = np.column_stack([rng.uniform(-0.1, 0.1, n_observed),
                               rng.uniform(-0.05, 0.05, n_observed)])
        p_now[0] = 0.0
        ticks = np.arange(-(history - 1), 1)[:, None, None]
        inputs = (p_now[None] + vel[None] * ticks) * pres[None, :, None]
        target = (p_now + vel * horizon) * pres[:, None]
        out.append(TrajectorySample(inputs, np.tile(pres, (history, 1)), target, pres.copy()))
    return out


def stack(samples: list[TrajectorySample]):
    return (np.stack([s.inputs for s in samples]), np.stack([s.presence for s in samples]),
            np.stack([s.target for s in samples]), np.stack([s.mask for s in samples]))


def position_error(params: ad.ParameterSet, samples: list[TrajectorySample]) -> float:
    """Mean Euclidean error over valid slots, in normalized units."""
    x, p, y, m = stack(samples)
    pred = predict_batch(params, x, p, m)
    err = np.linalg.norm(pred - y, axis=-1)
    return float((err * m).sum() / max(m.sum(), 1.0))


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int


def evaluate_loss(params: ad.ParameterSet, samples: list[TrajectorySample]) -> float:
    x, p, y, m = stack(samples)
    with ad.no_grad():
        return masked_mse(predictor_forward(params, x, p), y, m).item()


def train_predictor(dataset: list[TrajectorySample], epochs: int = 50, lr: float = 1e-3,
                    batch_size: int = 64, hidden: int = 256, seed: int = 0,
                    val_fraction: float = 0.1) -> tuple[ad.ParameterSet, TrainReport]:
    """Fit the predictor with masked MSE; returns the best-validation parameters."""
    if not dataset:
        raise ValueError("cannot train the predictor on an empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(val_fraction * len(dataset)))) if len(dataset) > 1 else 0
    val = [dataset[i] for i in order[:n_val]] or [dataset[order[0]]]
    train = [dataset[i] for i in order[n_val:]] or val
    t_steps, v = train[0].inputs.shape[:2]
    params = init_predictor(v, t_steps, hidden, seed)
    opt = ad.Adam()
    x, p, y, m = stack(train)

    best = params.clone()
    val_hist = [evaluate_loss(params, val)]
    train_hist = [evaluate_loss(params, train)]
    best_val, best_epoch = val_hist[0], 0
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), batch_size):
            idx = perm[start:start + batch_size]
            params.zero_grad()
            loss = masked_mse(predictor_forward(params, x[idx], p[idx]), y[idx], m[idx])
            ad.backward(loss)
            opt.step(params, lr)
            total += loss.item() * len(idx)
        train_hist.append(total / len(train))
        val_hist.append(evaluate_loss(params, val))
        if val_hist[-1] < best_val:
            best_val, best_epoch = val_hist[-1], epoch
            best = params.clone()
        log.debug("predictor epoch %d train %.5f val %.5f", epoch, train_hist[-1], val_hist[-1])
    return best, TrainReport(train_hist, val_hist, best_epoch)


# ---------------------------------------------------------------- dataset file

_MAGIC = b"TRJS"
_HEADER = struct.Struct("<4sIQII")  # magic, version, count, history, n_observed


def save_dataset(path: str | Path, samples: list[TrajectorySample]) -> None:
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    t, v = samples[0].inputs.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, len(samples), t, v))
        for s in samples:
            rec = np.concatenate([s.inputs.ravel(), s.presence.ravel(), s.target.ravel(),
                                  s.mask.ravel()]).astype("<f8")
            fh.write(rec.tobytes())


def load_dataset(path: str | Path) -> list[TrajectorySample]:
    raw = Path(path).read_bytes()
    magic, version, count, t, v = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path} is not a trajectory dataset")
    rec = t * v * 2 + t * v + v * 2 + v
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if flat.size != count * rec:
        raise ValueError(f"{path}: header says {count} records, payload disagrees")
    out = []
    for r in flat.reshape(count, rec):
        a = t * v * 2
        b = a + t * v
        c = b + v * 2
        out.append(TrajectorySample(r[:a].reshape(t, v, 2).copy(), r[a:b].reshape(t, v).copy(),
                                    r[b:c].reshape(v, 2).copy(), r[c:].copy()))
    return out


class IntentTracker:
    """Keeps one trajectory history per agent and produces fused observations."""

    def __init__(self, params: ad.ParameterSet | None, agent_ids, obs_cfg: ObservationConfig,
                 road: RoadConfig):
        self.params = params
        self.obs_cfg = obs_cfg
        self.road = road
        self.histories = {a: TrajectoryHistory(obs_cfg.history) for a in agent_ids}

    def push(self, world) -> None:
        for a, h in self.histories.items():
            push_history(h, world, a, self.obs_cfg)

    def predictions(self) -> dict[int, np.ndarray]:
        steps = self.params.meta["history"]
        ids = list(self.histories)
        built = [history_inputs(self.histories[a], self.road, self.obs_cfg.perception, steps)
                 for a in ids]
        pos = np.stack([b[0] for b in built])
        pres = np.stack([b[1] for b in built])
        cur = np.stack([b[2] for b in built])
        preds = predict_batch(self.params, pos, pres, cur)
        return dict(zip(ids, preds))
