"""Replay storage and the joint individual/global value update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .decision import N_ACTIONS, decode_joint_batch, encode_joint_batch, q_forward, q_values

LOSS_COLUMNS = ("update_index", "loss_ind", "loss_glo", "loss_reg", "loss_total",
                "lr_ind", "lr_glo", "temperature")

INDEPENDENT_KINDS = ("dqn", "double_dqn", "d3qn")
JOINT_KINDS = ("mqlc", "qcombo")


class IndTransition(NamedTuple):
    o: np.ndarray
    a: int
    r: float
    o_next: np.ndarray
    done: bool


class GloTransition(NamedTuple):
    s: np.ndarray
    a_joint: int
    r_g: float
    s_next: np.ndarray
    done: bool


class Batch(NamedTuple):
    x: np.ndarray       # (B, rows, F)
    a: np.ndarray       # (B,) action or joint index
    r: np.ndarray       # (B,)
    x_next: np.ndarray  # (B, rows, F)
    done: np.ndarray    # (B,) float 0/1


def collate(items: Sequence) -> Batch:
    return Batch(
        np.stack([t[0] for t in items]),
        np.array([t[1] for t in items], dtype=np.int64),
        np.array([t[2] for t in items], dtype=np.float64),
        np.stack([t[3] for t in items]),
        np.array([t[4] for t in items], dtype=np.float64),
    )


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling (no repeats within a batch)."""

    def __init__(self, capacity: int = 15000, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self._items: list = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def items(self) -> list:
        """Contents, oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def sample(self, batch_size: int) -> list:
        if batch_size > len(self._items):
            raise ValueError(f"cannot sample {batch_size} from {len(self._items)} items")
        idx = self.rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


# ---------------------------------------------------------------- targets


def bootstrap(r: np.ndarray, next_value: np.ndarray, done: np.ndarray, gamma: float) -> np.ndarray:
    return r + gamma * (1.0 - done) * next_value


def td_target_individual(batch: Batch, target_params: ad.ParameterSet, gamma: float) -> np.ndarray:
    """r + gamma * max_a Qhat(o', a); just r on terminal transitions."""
    return bootstrap(batch.r, q_values(target_params, batch.x_next).max(axis=1), batch.done, gamma)


def td_target_double(batch: Batch, online: ad.ParameterSet, target_params: ad.ParameterSet,
                     gamma: float) -> np.ndarray:
    """Online network picks the next action, target network scores it."""
    pick = q_values(online, batch.x_next).argmax(axis=1)
    nxt = q_values(target_params, batch.x_next)[np.arange(len(pick)), pick]
    return bootstrap(batch.r, nxt, batch.done, gamma)


def agent_slices(state: np.ndarray, n_agents: int) -> np.ndarray:
    """(B, N*V, F) -> (B*N, V, F), agent-major within each batch item."""
    b, rows, f = state.shape
    return state.reshape(b * n_agents, rows // n_agents, f)


def greedy_joint(individual: ad.ParameterSet, states: np.ndarray, n_agents: int) -> np.ndarray:
    """Joint index formed from each agent's argmax on its slice of the state."""
    q = q_values(individual, agent_slices(states, n_agents))
    picks = q.argmax(axis=1).reshape(len(states), n_agents)
    return encode_joint_batch(picks)


def td_target_global(batch: Batch, global_target: ad.ParameterSet,
                     individual_target: ad.ParameterSet, gamma: float, n_agents: int) -> np.ndarray:
    """r_g + gamma * Qhat_glo(s', a') with a' from the individual target argmaxes."""
    joint = greedy_joint(individual_target, batch.x_next, n_agents)
    nxt = q_values(global_target, batch.x_next)[np.arange(len(joint)), joint]
    return bootstrap(batch.r, nxt, batch.done, gamma)


# ---------------------------------------------------------------- losses


def loss_individual(batch: Batch, params: ad.ParameterSet, targets: np.ndarray) -> ad.Tensor:
    q = ad.gather_last(q_forward(params, batch.x), batch.a)
    return ad.mse(q, targets)


def loss_global(batch: Batch, params: ad.ParameterSet, targets: np.ndarray,
                q_glo: ad.Tensor | None = None) -> ad.Tensor:
    q = q_glo if q_glo is not None else ad.gather_last(q_forward(params, batch.x), batch.a)
    return ad.mse(q, targets)


def loss_regularizer(batch: Batch, global_params: ad.ParameterSet,
                     individual_params: ad.ParameterSet, k_weights: Sequence[float],
                     q_glo: ad.Tensor | None = None) -> ad.Tensor:
    """Mean of (Q_glo(s, a) - sum_i k_i Q_i(o_i, a_i))^2 over the batch."""
    k = np.asarray(k_weights, dtype=np.float64)
    n = len(k)
    b = len(batch.a)
    if q_glo is None:
        q_glo = ad.gather_last(q_forward(global_params, batch.x), batch.a)
    acts = decode_joint_batch(batch.a, n).reshape(-1)
    q_ind = ad.gather_last(q_forward(individual_params, agent_slices(batch.x, n)), acts)
    mixed = ad.sum_axis(ad.mul(ad.reshape(q_ind, (b, n)), k[None, :]), 1)
    return ad.mean_all(ad.square(ad.sub(q_glo, mixed)))


# ---------------------------------------------------------------- learner


@dataclass
class LearnerConfig:
    kind: str = "mqlc"
    gamma: float = 0.8
    lam: float = 0.3
    lr_ind: float = 5e-4
    lr_glo: float = 5e-3
    lr_floor: float = 1e-5
    batch_size: int = 32
    target_sync: int = 200
    lr_window: int = 500
    lr_min_improvement: float = 0.01


@dataclass
class TrainState:
    lr_ind: float = 5e-4
    lr_glo: float = 5e-3
    episode: int = 0
    temperature: float = 1.0
    updates: int = 0
    global_losses: list = field(default_factory=list)


@dataclass
class LossReport:
    update_index: int
    loss_ind: float
    loss_glo: float
    loss_reg: float
    loss_total: float
    lr_ind: float
    lr_glo: float
    temperature: float

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in LOSS_COLUMNS)


def dynamic_lr_step(state: TrainState, recent_global_losses: Sequence[float] | None = None,
                    window: int = 500, min_improvement: float = 0.01,
                    floor: float = 1e-5) -> TrainState:
    """Halve the global learning rate when the windowed loss stops improving.

    Compares the mean of the latest ``window`` losses with the window before;
    less than ``min_improvement`` relative improvement halves ``lr_glo``.
    """
    losses = state.global_losses if recent_global_losses is None else recent_global_losses
    if len(losses) < 2 * window:
        return state
    prev = float(np.mean(losses[-2 * window:-window]))
    cur = float(np.mean(losses[-window:]))
    if cur > prev * (1.0 - min_improvement):
        state.lr_glo = max(state.lr_glo / 2.0, floor)
    return state


class Learner:
    """Owns the online/target networks and their optimizers."""

    def __init__(self, individual: ad.ParameterSet, global_net: ad.ParameterSet | None,
                 n_agents: int, cfg: LearnerConfig | None = None):
        self.cfg = cfg or LearnerConfig()
        if self.cfg.kind not in INDEPENDENT_KINDS + JOINT_KINDS:
            raise ValueError(f"unknown learner kind {self.cfg.kind!r}")
        if self.cfg.kind in JOINT_KINDS and global_net is None:
            raise ValueError(f"{self.cfg.kind} needs a global network")
        self.n_agents = n_agents
        self.individual = individual
        self.global_net = global_net if self.cfg.kind in JOINT_KINDS else None
        self.ind_target = individual.clone(requires_grad=False)
        self.glo_target = self.global_net.clone(requires_grad=False) if self.global_net else None
        self.opt_ind = ad.Adam()
        self.opt_glo = ad.Adam()
        self.state = TrainState(lr_ind=self.cfg.lr_ind, lr_glo=self.cfg.lr_glo)
        self.k_weights = np.full(n_agents, 1.0 / n_agents)

    @property
    def joint(self) -> bool:
        return self.global_net is not None

    def sync_targets(self) -> None:
        self.ind_target.copy_from(self.individual)
        if self.joint:
            self.glo_target.copy_from(self.global_net)

    def ready(self, ind_buffer: ReplayBuffer, glo_buffer: ReplayBuffer | None) -> bool:
        b = self.cfg.batch_size
        return len(ind_buffer) >= b and (not self.joint or (glo_buffer is not None and len(glo_buffer) >= b))

    def individual_targets(self, batch: Batch) -> np.ndarray:
        if self.cfg.kind in ("double_dqn", "d3qn"):
            return td_target_double(batch, self.individual, self.ind_target, self.cfg.gamma)
        return td_target_individual(batch, self.ind_target, self.cfg.gamma)

    def losses(self, b_ind: Batch, b_glo: Batch | None):
        """(L_ind, L_glo, L_reg, L_tot) tensors for the given batches."""
        cfg = self.cfg
        l_ind = loss_individual(b_ind, self.individual, self.individual_targets(b_ind))
        if not self.joint:
            return l_ind, None, None, l_ind
        y_glo = td_target_global(b_glo, self.glo_target, self.ind_target, cfg.gamma, self.n_agents)
        q_glo = ad.gather_last(q_forward(self.global_net, b_glo.x), b_glo.a)
        l_glo = loss_global(b_glo, self.global_net, y_glo, q_glo)
        l_reg = loss_regularizer(b_glo, self.global_net, self.individual, self.k_weights, q_glo)
        total = ad.add(ad.add(l_glo, l_ind), ad.scale(l_reg, cfg.lam))
        return l_ind, l_glo, l_reg, total

    def update_on(self, b_ind: Batch, b_glo: Batch | None) -> LossReport:
        self.individual.zero_grad()
        if self.joint:
            self.global_net.zero_grad()
        l_ind, l_glo, l_reg, total = self.losses(b_ind, b_glo)
        ad.backward(total)
        self.opt_ind.step(self.individual, self.state.lr_ind)
        if self.joint:
            self.opt_glo.step(self.global_net, self.state.lr_glo)

        st = self.state
        st.updates += 1
        if st.updates % self.cfg.target_sync == 0:
            self.sync_targets()
        if self.joint:
            st.global_losses.append(l_glo.item())
            if len(st.global_losses) > 2 * self.cfg.lr_window:
                del st.global_losses[: -2 * self.cfg.lr_window]
            if st.updates % self.cfg.lr_window == 0:
                dynamic_lr_step(st, None, self.cfg.lr_window, self.cfg.lr_min_improvement,
                                self.cfg.lr_floor)
        return LossReport(
            st.updates,
            l_ind.item(),
            l_glo.item() if l_glo is not None else 0.0,
            l_reg.item() if l_reg is not None else 0.0,
            total.item(),
            st.lr_ind,
            st.lr_glo,
            st.temperature,
        )

    def update(self, ind_buffer: ReplayBuffer, glo_buffer: ReplayBuffer | None) -> LossReport | None:
        """Sample both buffers and take one optimizer step; None while buffers are short."""
        if not self.ready(ind_buffer, glo_buffer):
            return None
        b_ind = collate(ind_buffer.sample(self.cfg.batch_size))
        b_glo = collate(glo_buffer.sample(self.cfg.batch_size)) if self.joint else None
        return self.update_on(b_ind, b_glo)


def n_joint_actions(n_agents: int) -> int:
    return N_ACTIONS ** n_agents
