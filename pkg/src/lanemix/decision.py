"""Value networks and the joint-action decision procedure.

Each agent scores its five meta-actions with the shared individual network.
Agents whose surroundings look urgent commit to their best action; the rest
offer their top-k actions, and the global network picks the best joint action
from the Cartesian product of everyone's offers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .observation import PRESENCE, VX
from .sim import MetaAction

N_ACTIONS = len(MetaAction)
MAX_JOINT_CANDIDATES = 1024


# ---------------------------------------------------------------- joint actions


def encode_joint(actions) -> int:
    idx = 0
    for a in actions:
        a = int(a)
        if not 0 <= a < N_ACTIONS:
            raise ValueError(f"invalid action code {a}")
        idx = idx * N_ACTIONS + a
    return idx


def decode_joint(index: int, n_agents: int) -> tuple[int, ...]:
    if not 0 <= index < N_ACTIONS ** n_agents:
        raise ValueError(f"joint index {index} out of range for {n_agents} agents")
    out = []
    for _ in range(n_agents):
        index, a = divmod(index, N_ACTIONS)
        out.append(a)
    return tuple(reversed(out))


@dataclass(frozen=True)
class JointAction:
    actions: tuple

    @property
    def index(self) -> int:
        return encode_joint(self.actions)

    @classmethod
    def from_index(cls, index: int, n_agents: int) -> "JointAction":
        return cls(decode_joint(index, n_agents))

    def __iter__(self):
        return iter(self.actions)

    def __len__(self):
        return len(self.actions)


def decode_joint_batch(indices: np.ndarray, n_agents: int) -> np.ndarray:
    """(B,) joint indices -> (B, N) per-agent action codes."""
    indices = np.asarray(indices, dtype=np.int64)
    powers = N_ACTIONS ** np.arange(n_agents - 1, -1, -1)
    return (indices[:, None] // powers[None, :]) % N_ACTIONS


def encode_joint_batch(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    powers = N_ACTIONS ** np.arange(actions.shape[1] - 1, -1, -1)
    return actions @ powers


# ---------------------------------------------------------------- features


def env_features(obs: np.ndarray) -> tuple[float, float]:
    """Mean normalized vx over present rows and neighbour density in [0, 1]."""
    present = obs[:, PRESENCE] > 0.5
    count = int(present.sum())
    mean_speed = float(obs[present, VX].mean()) if count else 0.0
    density = (count - 1) / (obs.shape[0] - 1) if count else 0.0
    return mean_speed, float(max(density, 0.0))


def env_features_batch(x: np.ndarray, n_agents: int = 1) -> np.ndarray:
    """(B, N*V, F) -> (B, 2); per-agent features averaged over agent blocks."""
    b, rows, _ = x.shape
    v = rows // n_agents
    blocks = x.reshape(b, n_agents, v, -1)
    present = blocks[..., PRESENCE] > 0.5
    count = present.sum(axis=-1)
    speed_sum = (blocks[..., VX] * present).sum(axis=-1)
    mean_speed = np.divide(speed_sum, count, out=np.zeros_like(speed_sum), where=count > 0)
    density = np.clip((count - 1) / max(v - 1, 1), 0.0, None)
    return np.stack([mean_speed.mean(axis=1), density.mean(axis=1)], axis=1)


# ---------------------------------------------------------------- Q network


@dataclass(frozen=True)
class QNetSpec:
    rows: int              # V for individual, N*V for global
    features: int          # 5, or 7 with intent
    outputs: int           # 5 or 5**N
    n_agents: int = 1      # agent blocks stacked in the input
    hidden: int = 256
    env_hidden: int = 8
    branches: bool = True  # GCN position branch + environment branch
    dueling: bool = False


def init_qnet(spec: QNetSpec, seed: int = 0, name: str = "qnet") -> ad.ParameterSet:
    rng = np.random.default_rng(seed)
    h = spec.hidden
    meta = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
    p = ad.ParameterSet(name, seed, meta)
    width = h
    if spec.branches:
        p.add("gcn1_w", ad.he_uniform(rng, 2, (2, h)))
        p.add("gcn1_b", np.zeros(h))
        p.add("gcn2_w", ad.he_uniform(rng, h, (h, h)))
        p.add("gcn2_b", np.zeros(h))
        p.add("sur_w", ad.he_uniform(rng, h, (h, h)))
        p.add("sur_b", np.zeros(h))
        p.add("env_w", ad.he_uniform(rng, 2, (2, spec.env_hidden)))
        p.add("env_b", np.zeros(spec.env_hidden))
        width = 2 * h + spec.env_hidden
    flat = spec.rows * spec.features
    p.add("ori1_w", ad.he_uniform(rng, flat, (flat, h)))
    p.add("ori1_b", np.zeros(h))
    p.add("ori2_w", ad.he_uniform(rng, h, (h, h)))
    p.add("ori2_b", np.zeros(h))
    lim = 1.0 / np.sqrt(width)
    p.add("head_w", rng.uniform(-lim, lim, (width, spec.outputs)) * 0.1)
    p.add("head_b", np.zeros(spec.outputs))
    if spec.dueling:
        p.add("value_w", rng.uniform(-lim, lim, (width, 1)) * 0.1)
        p.add("value_b", np.zeros(1))
    return p


def spec_of(params: ad.ParameterSet) -> QNetSpec:
    return QNetSpec(**params.meta)


def q_forward(params: ad.ParameterSet, x: np.ndarray) -> ad.Tensor:
    """Action values for a batch (B, rows, F) or a single (rows, F) input.

    Rows with presence 0 are zeroed before use, so whatever they held cannot
    change the output.
    """
    spec = spec_of(params)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (spec.rows, spec.features):
        raise ValueError(
            f"q-network expects (B, {spec.rows}, {spec.features}), got {x.shape}"
        )
    b = x.shape[0]
    presence = (x[..., PRESENCE] > 0.5).astype(np.float64)
    x = x * presence[..., None]

    parts = []
    if spec.branches:
        adj = ad.normalized_adjacency(presence, block=spec.rows // spec.n_agents)
        h = ad.gcn_forward(adj, x[..., 1:3], params["gcn1_w"], params["gcn1_b"], "relu")
        h = ad.gcn_forward(adj, h, params["gcn2_w"], params["gcn2_b"], "relu")
        count = np.maximum(presence.sum(axis=-1, keepdims=True), 1.0)
        pooled = ad.reshape(ad.matmul((presence / count)[:, None, :], h), (b, spec.hidden))
        parts.append(ad.fc_forward(pooled, params["sur_w"], params["sur_b"], "relu"))
        env = env_features_batch(x, spec.n_agents)
        parts.append(ad.fc_forward(env, params["env_w"], params["env_b"], "relu"))
    ori = ad.fc_forward(x.reshape(b, -1), params["ori1_w"], params["ori1_b"], "relu")
    ori = ad.fc_forward(ori, params["ori2_w"], params["ori2_b"], "relu")
    parts.append(ori)
    z = ad.relu(ad.concat(parts, axis=-1)) if len(parts) > 1 else ori
    q = ad.fc_forward(z, params["head_w"], params["head_b"], None)
    if spec.dueling:
        value = ad.fc_forward(z, params["value_w"], params["value_b"], None)
        adv_mean = ad.scale(ad.reshape(ad.sum_axis(q, 1), (b, 1)), 1.0 / spec.outputs)
        q = ad.add(value, ad.sub(q, adv_mean))
    if single:
        q = ad.reshape(q, (spec.outputs,))
    return q


def q_values(params: ad.ParameterSet, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return q_forward(params, x).data


# ---------------------------------------------------------------- priority


@dataclass(frozen=True)
class Priority:
    urgency: float
    level: str  # "high" | "low"

    @property
    def high(self) -> bool:
        return self.level == "high"


def urgency_terms(obs: np.ndarray) -> tuple[float, float, float]:
    """(mean speed, density, speed variance) with speeds mapped to [0, 1]."""
    present = obs[:, PRESENCE] > 0.5
    speeds = (obs[present, VX] + 1.0) / 2.0
    if speeds.size == 0:
        return 0.0, 0.0, 0.0
    density = (speeds.size - 1) / (obs.shape[0] - 1)
    return float(speeds.mean()), float(density), float(speeds.var())


def urgency_from_terms(m_velocity: float, t_density: float, s_variance: float,
                       alpha: float = 2.0) -> float:
    return m_velocity + t_density + alpha * s_variance


def urgency(obs: np.ndarray, alpha: float = 2.0) -> float:
    return urgency_from_terms(*urgency_terms(obs), alpha=alpha)


def priority_of(value: float, threshold: float = 1.0) -> Priority:
    return Priority(value, "high" if value > threshold else "low")


# ---------------------------------------------------------------- selection


def ranked_actions(q: np.ndarray) -> list[int]:
    """Actions by descending value; equal values keep the lower code first."""
    return sorted(range(len(q)), key=lambda a: (-q[a], a))


def select_candidates(q: np.ndarray, priority: Priority, k: int = 2) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = ranked_actions(np.asarray(q))
    return ranked[:1] if priority.high else ranked[:k]


def explore_action(q: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Sample from softmax(q / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = boltzmann(q, temperature)
    return int(rng.choice(len(p), p=p))


def boltzmann(q: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(q, dtype=np.float64) / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def explore_candidates(q: np.ndarray, priority: Priority, k: int, temperature: float,
                       rng: np.random.Generator) -> list[int]:
    """Candidate set drawn from the Boltzmann distribution without replacement."""
    n = 1 if priority.high else min(k, len(q))
    p = boltzmann(q, temperature)
    return [int(a) for a in rng.choice(len(q), size=n, replace=False, p=p)]


def temperature_schedule(episode: int, total: int, start: float = 1.0, end: float = 0.05,
                         anneal_fraction: float = 0.6) -> float:
    span = max(anneal_fraction * total, 1.0)
    frac = min(episode / span, 1.0)
    return start + (end - start) * frac


# ---------------------------------------------------------------- arbitration


def prune_candidates(candidate_sets: list[list[int]], cap: int = MAX_JOINT_CANDIDATES) -> list[list[int]]:
    sets = [list(s) for s in candidate_sets]
    while int(np.prod([len(s) for s in sets])) > cap:
        largest = max(range(len(sets)), key=lambda i: (len(sets[i]), -i))
        sets[largest].pop()
    return sets


def arbitrate_values(global_q: np.ndarray, candidate_sets, cap: int = MAX_JOINT_CANDIDATES,
                     ) -> tuple[JointAction, int]:
    """Best joint action among the candidate product, plus how many were scored."""
    if any(len(s) == 0 for s in candidate_sets):
        raise ValueError("every agent needs at least one candidate action")
    sets = prune_candidates(candidate_sets, cap)
    best_idx, best_val, count = -1, -np.inf, 0
    for combo in itertools.product(*sets):
        idx = encode_joint(combo)
        val = global_q[idx]
        count += 1
        if val > best_val or (val == best_val and idx < best_idx):
            best_idx, best_val = idx, val
    return JointAction.from_index(best_idx, len(sets)), count


def arbitrate(global_params: ad.ParameterSet, state: np.ndarray, candidate_sets,
              cap: int = MAX_JOINT_CANDIDATES) -> JointAction:
    if any(len(s) == 0 for s in candidate_sets):
        raise ValueError("every agent needs at least one candidate action")
    if all(len(s) == 1 for s in candidate_sets):
        return JointAction(tuple(int(s[0]) for s in candidate_sets))
    return arbitrate_values(q_values(global_params, state), candidate_sets, cap)[0]


# ---------------------------------------------------------------- policy


@dataclass
class DecisionConfig:
    k_candidates: int = 2
    epsilon: float = 1.0          # urgency threshold
    alpha: float = 2.0            # weight of the speed-variance term
    use_global: bool = True       # False: each agent plays its own choice
    use_priority: bool = True     # False: every agent is low priority


@dataclass
class DecisionInfo:
    urgencies: list[float] = field(default_factory=list)
    priorities: list[str] = field(default_factory=list)
    candidates: list[list[int]] = field(default_factory=list)
    evaluated: int = 0


def act(observations: list[np.ndarray], kinematic: list[np.ndarray], state: np.ndarray,
        individual: ad.ParameterSet, global_net: ad.ParameterSet | None, cfg: DecisionConfig,
        mode: str = "eval", temperature: float = 0.05,
        rng: np.random.Generator | None = None) -> tuple[JointAction, DecisionInfo]:
    """One decision tick for all agents.

    ``observations`` are the network inputs (intent fused when enabled);
    ``kinematic`` are the plain V x 5 observations used for urgency.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng")
    q_all = q_values(individual, np.stack(observations))
    info = DecisionInfo()
    for q, kin in zip(q_all, kinematic):
        u = urgency(kin, cfg.alpha)
        pr = priority_of(u, cfg.epsilon) if cfg.use_priority else Priority(u, "low")
        info.urgencies.append(u)
        info.priorities.append(pr.level)
        if not cfg.use_global or global_net is None:
            a = explore_action(q, temperature, rng) if mode == "train" else ranked_actions(q)[0]
            info.candidates.append([a])
        elif mode == "train":
            info.candidates.append(explore_candidates(q, pr, cfg.k_candidates, temperature, rng))
        else:
            info.candidates.append(select_candidates(q, pr, cfg.k_candidates))
    if not cfg.use_global or global_net is None or all(len(c) == 1 for c in info.candidates):
        info.evaluated = 1
        return JointAction(tuple(c[0] for c in info.candidates)), info
    joint, info.evaluated = arbitrate_values(q_values(global_net, state), info.candidates)
    return joint, info
