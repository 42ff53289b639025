"""Experiment orchestration: training and evaluation loops, baselines, ablations, sweeps."""

from __future__ import annotations

import ast
import configparser
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import intent
from .decision import (DecisionConfig, QNetSpec, act, encode_joint, init_qnet, spec_of,
                       temperature_schedule)
from .learner import (GloTransition, IndTransition, Learner, LearnerConfig, LOSS_COLUMNS,
                      ReplayBuffer, n_joint_actions)
from .observation import N_FEATURES, ObservationConfig, assemble_state, observe
from .sim import ConfigError, RoadConfig, ScenarioConfig, init_scenario

log = logging.getLogger(__name__)

ALGORITHMS = ("random", "dqn", "double_dqn", "d3qn", "qcombo", "mqlc")
ABLATIONS = ("no_intent", "no_feature_branches", "no_global_decision", "no_priority")
EPISODE_COLUMNS = ("episode", "length", "mean_speed", "total_reward")
METRIC_COLUMNS = ("mean_episode_length", "mean_speed", "mean_total_reward",
                  "episodes_evaluated", "crash_rate")
URGENCY_BINS = (0.0, 0.5, 1.0, 1.5, float("inf"))
EVAL_SEED_OFFSET = 1_000_003


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algorithm: str = "mqlc"
    episodes: int = 10000
    checkpoint_every: int = 1000
    lam: float = 0.3
    epsilon: float = 1.0
    alpha: float = 2.0
    k_candidates: int = 2
    no_intent: bool = False
    no_feature_branches: bool = False
    no_global_decision: bool = False
    no_priority: bool = False
    seed: int = 0
    # not named by the experiment protocol; desk-scale knobs
    hidden: int = 256
    warmup: int = 200
    eval_episodes: int = 50
    gamma: float = 0.8
    lr_ind: float = 5e-4
    lr_glo: float = 5e-3
    batch_size: int = 32
    buffer_capacity: int = 15000
    target_sync: int = 200
    n_observed: int = 5
    perception: float = 180.0
    history: int = 3
    horizon: int = 1
    intent_episodes: int = 60
    intent_epochs: int = 20
    intent_hidden: int = 64
    intent_checkpoint: str = ""

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.episodes < 1 or self.checkpoint_every < 1 or self.eval_episodes < 1:
            raise ConfigError("episodes, checkpoint_every and eval_episodes must be >= 1")
        if self.k_candidates < 1:
            raise ConfigError("k_candidates must be >= 1")
        if self.algorithm not in ("mqlc", "qcombo") and any(self.flags().values()):
            raise ConfigError("ablation flags only apply to mqlc and qcombo")

    def flags(self) -> dict:
        return {k: getattr(self, k) for k in ABLATIONS}

    @property
    def obs_cfg(self) -> ObservationConfig:
        return ObservationConfig(self.n_observed, self.perception, self.history, self.horizon)

    @property
    def uses_intent(self) -> bool:
        return self.algorithm == "mqlc" and not self.no_intent

    @property
    def decision(self) -> DecisionConfig:
        return DecisionConfig(
            k_candidates=self.k_candidates,
            epsilon=self.epsilon,
            alpha=self.alpha,
            use_global=self.algorithm == "mqlc" and not self.no_global_decision,
            use_priority=not self.no_priority,
        )

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "scenario"}
        sc = asdict(self.scenario)
        sc["road"] = asdict(self.scenario.road)
        sc["reward_weights"] = list(self.scenario.reward_weights)
        d["scenario"] = sc
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sc = dict(d.pop("scenario", {}))
        road = RoadConfig(**sc.pop("road", {}))
        if "reward_weights" in sc:
            sc["reward_weights"] = tuple(sc["reward_weights"])
        return cls(scenario=ScenarioConfig(road=road, **sc), **d)


_SCENARIO_KEYS = {f.name for f in fields(ScenarioConfig)} - {"road", "seed"}
_ROAD_KEYS = {f.name for f in fields(RoadConfig)}
_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)} - {"scenario"}


def _parse_value(raw: str):
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Build a config from flat ``key -> value`` pairs.

    Scenario and road fields may appear bare (``density_mode``) or prefixed
    (``scenario.density_mode``); ``seed`` sets both the run and scenario seed.
    """
    base = base or ExperimentConfig()
    exp, sc, road = {}, {}, {}
    for key, value in values.items():
        name = key.split(".", 1)[1] if key.startswith(("scenario.", "road.")) else key
        if name in _EXPERIMENT_KEYS:
            exp[name] = value
        elif name in _SCENARIO_KEYS:
            sc[name] = value
        elif name in _ROAD_KEYS:
            road[name] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "reward_weights" in sc:
        sc["reward_weights"] = tuple(sc["reward_weights"])
    scenario = base.scenario
    if "density_mode" in sc:
        # counts follow the new mode unless given explicitly
        sc.setdefault("n_agents", None)
        sc.setdefault("n_hdv", None)
    try:
        if road:
            sc["road"] = replace(scenario.road, **road)
        scenario = replace(scenario, seed=exp.get("seed", base.seed), **sc)
        return replace(base, scenario=scenario, **exp)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a ``key = value`` file (``#`` comments, optional ``[section]`` headers)."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        text = path.read_text()
        try:
            parser.read_string("[experiment]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc.message.splitlines()[0]}") from None
        for section in parser.sections():
            prefix = "" if section in ("experiment", "scenario", "road") else f"{section}."
            for k, v in parser.items(section):
                values[prefix + k] = _parse_value(v)
    values.update(overrides or {})
    return config_from_mapping(values)


# ---------------------------------------------------------------- networks


@dataclass
class Networks:
    individual: ad.ParameterSet | None = None
    global_net: ad.ParameterSet | None = None
    predictor: ad.ParameterSet | None = None


def n_features(cfg: ExperimentConfig) -> int:
    return N_FEATURES + (2 if cfg.uses_intent else 0)


def build_networks(cfg: ExperimentConfig, predictor: ad.ParameterSet | None = None) -> Networks:
    if cfg.algorithm == "random":
        return Networks()
    n, v, f = cfg.scenario.n_agents, cfg.n_observed, n_features(cfg)
    branches = not cfg.no_feature_branches
    ind_spec = QNetSpec(v, f, 5, 1, cfg.hidden, branches=branches,
                        dueling=cfg.algorithm == "d3qn")
    individual = init_qnet(ind_spec, cfg.seed, "individual")
    global_net = None
    if cfg.algorithm in ("mqlc", "qcombo"):
        glo_spec = QNetSpec(n * v, f, n_joint_actions(n), n, cfg.hidden, branches=branches)
        global_net = init_qnet(glo_spec, cfg.seed + 1, "global")
    return Networks(individual, global_net, predictor if cfg.uses_intent else None)


def ensure_predictor(cfg: ExperimentConfig) -> ad.ParameterSet | None:
    """Load or fit the trajectory predictor when the configuration uses intent."""
    if not cfg.uses_intent:
        return None
    if cfg.intent_checkpoint:
        return ad.ParameterSet.load(cfg.intent_checkpoint, requires_grad=False)
    data = intent.collect_dataset(cfg.scenario, cfg.intent_episodes, cfg.obs_cfg,
                                  seed=cfg.seed + 7)
    params, report = intent.train_predictor(data, cfg.intent_epochs, hidden=cfg.intent_hidden,
                                            seed=cfg.seed)
    log.info("predictor fitted on %d windows, best val loss %.5f",
             len(data), min(report.val_loss))
    return params.clone(requires_grad=False)


def save_checkpoint(path: Path, cfg: ExperimentConfig, nets: Networks, episode: int) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    meta = {"algorithm": cfg.algorithm, "episode": episode, "config": cfg.to_dict()}
    (path / "experiment.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name in ("individual", "global_net", "predictor"):
        p = getattr(nets, name)
        if p is not None:
            p.save(path / name)
    return path


def load_checkpoint(path: str | Path) -> tuple[ExperimentConfig, Networks]:
    path = Path(path)
    meta_file = path / "experiment.json"
    if not meta_file.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    meta = json.loads(meta_file.read_text())
    cfg = ExperimentConfig.from_dict(meta["config"])
    nets = Networks()
    for name in ("individual", "global_net", "predictor"):
        if (path / name).is_dir():
            setattr(nets, name, ad.ParameterSet.load(path / name, requires_grad=False))
    expected = build_networks(cfg, nets.predictor)
    for name in ("individual", "global_net"):
        want, got = getattr(expected, name), getattr(nets, name)
        if (want is None) != (got is None) or (want is not None and want.shapes() != got.shapes()):
            raise CheckpointError(f"checkpoint {name} does not match the {cfg.algorithm} architecture")
    return cfg, nets


# ---------------------------------------------------------------- episodes


@dataclass
class EpisodeStats:
    length: int
    mean_speed: float
    total_reward: float
    crashed: bool

    def row(self, episode: int) -> tuple:
        return (episode, self.length, self.mean_speed, self.total_reward)


@dataclass
class Trainer:
    """Replay buffers, learner and the global tick counter of one run."""

    learner: Learner
    ind_buffer: ReplayBuffer
    glo_buffer: ReplayBuffer | None
    warmup: int
    ticks: int = 0
    reports: list = field(default_factory=list)

    def record(self, obs, actions, rewards, next_obs, state, joint, r_g, next_state, done):
        for o, a, r, o2 in zip(obs, actions, rewards, next_obs):
            self.ind_buffer.push(IndTransition(o, int(a), float(r), o2, done))
        if self.glo_buffer is not None:
            self.glo_buffer.push(GloTransition(state, int(joint), float(r_g), next_state, done))
        self.ticks += 1
        if self.ticks >= self.warmup:
            report = self.learner.update(self.ind_buffer, self.glo_buffer)
            if report is not None:
                self.reports.append(report)


def _features(world, tracker, obs_cfg):
    kin = [observe(world, a, obs_cfg) for a in world.agent_ids]
    if tracker is None:
        return kin, kin
    tracker.push(world)
    preds = tracker.predictions()
    return kin, [intent.fuse_intent(k, preds[a]) for k, a in zip(kin, world.agent_ids)]


def run_episode(cfg: ExperimentConfig, nets: Networks, scenario: ScenarioConfig,
                rng: np.random.Generator, mode: str = "eval", temperature: float = 0.05,
                trainer: Trainer | None = None, urgencies: list | None = None) -> EpisodeStats:
    """Play one episode; in train mode transitions feed ``trainer``."""
    world = init_scenario(scenario)
    obs_cfg = cfg.obs_cfg
    tracker = None
    if nets.predictor is not None:
        tracker = intent.IntentTracker(nets.predictor, world.agent_ids, obs_cfg, world.road)
    decision = cfg.decision
    kin, obs = _features(world, tracker, obs_cfg)
    total, speeds, crashed = 0.0, [], False
    while not world.terminated:
        state = assemble_state(obs)
        if nets.individual is None:
            joint = tuple(int(a) for a in rng.integers(0, 5, size=len(world.agent_ids)))
            info = None
        else:
            choice, info = act(obs, kin, state, nets.individual, nets.global_net, decision,
                               mode, temperature, rng)
            joint = choice.actions
        if urgencies is not None and info is not None:
            urgencies.extend(info.urgencies)
        outcome = world.step(joint)
        total += outcome.global_reward
        speeds.append(float(np.mean([a.vx for a in world.agents])))
        crashed = crashed or any(outcome.crashed)
        next_kin, next_obs = _features(world, tracker, obs_cfg)
        if trainer is not None:
            trainer.record(obs, joint, outcome.rewards, next_obs, state, encode_joint(joint),
                           outcome.global_reward, assemble_state(next_obs), any(outcome.crashed))
        kin, obs = next_kin, next_obs
    return EpisodeStats(world.tick, float(np.mean(speeds)) if speeds else 0.0, total, crashed)


def episode_seeds(seed: int, count: int, offset: int = 0) -> list[int]:
    ss = np.random.SeedSequence([seed, offset])
    return [int(s) for s in ss.generate_state(count, dtype=np.uint32)]


def make_trainer(cfg: ExperimentConfig, nets: Networks) -> Trainer | None:
    if cfg.algorithm == "random":
        return None
    lc = LearnerConfig(kind=cfg.algorithm, gamma=cfg.gamma, lam=cfg.lam, lr_ind=cfg.lr_ind,
                       lr_glo=cfg.lr_glo, batch_size=cfg.batch_size, target_sync=cfg.target_sync)
    learner = Learner(nets.individual, nets.global_net, cfg.scenario.n_agents, lc)
    glo = ReplayBuffer(cfg.buffer_capacity, cfg.seed + 2) if learner.joint else None
    return Trainer(learner, ReplayBuffer(cfg.buffer_capacity, cfg.seed + 1), glo, cfg.warmup)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class TrainResult:
    config: ExperimentConfig
    networks: Networks
    episodes: list[EpisodeStats]
    checkpoints: list[Path]
    best_reward: float
    out_dir: Path


def cmd_train(cfg: ExperimentConfig, out_dir: str | Path, urgencies: list | None = None,
              predictor: ad.ParameterSet | None = None) -> TrainResult:
    """Train ``cfg.algorithm``; writes episodes.csv, losses.csv and checkpoints/."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    predictor = predictor if predictor is not None else ensure_predictor(cfg)
    nets = build_networks(cfg, predictor)
    trainer = make_trainer(cfg, nets)
    rng = np.random.default_rng([cfg.seed, 1])
    seeds = episode_seeds(cfg.seed, cfg.episodes)
    stats, checkpoints, best = [], [], -np.inf
    started = time.perf_counter()
    for ep, s in enumerate(seeds, start=1):
        temp = temperature_schedule(ep - 1, cfg.episodes)
        if trainer is not None:
            trainer.learner.state.episode = ep
            trainer.learner.state.temperature = temp
        st = run_episode(cfg, nets, cfg.scenario.with_seed(s), rng, "train", temp, trainer,
                         urgencies)
        stats.append(st)
        if trainer is not None:
            if st.total_reward > best:
                best = st.total_reward
                save_checkpoint(out / "checkpoints" / "best", cfg, nets, ep)
            if ep % cfg.checkpoint_every == 0:
                checkpoints.append(save_checkpoint(out / "checkpoints" / f"episode_{ep:06d}",
                                                   cfg, nets, ep))
        if ep % max(1, cfg.episodes // 10) == 0:
            log.info("%s episode %d/%d reward %.3f (%.0fs)", cfg.algorithm, ep, cfg.episodes,
                     st.total_reward, time.perf_counter() - started)
    _write_csv(out / "episodes.csv", EPISODE_COLUMNS, [s.row(i) for i, s in enumerate(stats, 1)])
    reports = trainer.reports if trainer is not None else []
    _write_csv(out / "losses.csv", LOSS_COLUMNS, [r.row() for r in reports])
    return TrainResult(cfg, nets, stats, checkpoints, float(max(s.total_reward for s in stats)), out)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalMetrics:
    mean_episode_length: float
    mean_speed: float
    mean_total_reward: float
    episodes_evaluated: int
    crash_rate: float

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


def evaluate(cfg: ExperimentConfig, nets: Networks, scenario: ScenarioConfig | None = None,
             episodes: int | None = None) -> EvalMetrics:
    """Deterministic evaluation on a fixed, training-disjoint set of scenario seeds."""
    scenario = scenario or cfg.scenario
    episodes = episodes or cfg.eval_episodes
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rng = np.random.default_rng([scenario.seed, 2])
    stats = [run_episode(cfg, nets, scenario.with_seed(s), rng, "eval")
             for s in episode_seeds(scenario.seed, episodes, EVAL_SEED_OFFSET)]
    return EvalMetrics(
        float(np.mean([s.length for s in stats])),
        float(np.mean([s.mean_speed for s in stats])),
        float(np.mean([s.total_reward for s in stats])),
        len(stats),
        float(np.mean([s.crashed for s in stats])),
    )


def cmd_eval(checkpoint: str | Path | None, scenario: ScenarioConfig | None = None,
             episodes: int = 50, algorithm: str | None = None) -> EvalMetrics:
    """Evaluate a saved checkpoint; ``checkpoint=None`` evaluates the random policy."""
    if checkpoint is None:
        if algorithm not in (None, "random"):
            raise CheckpointError(f"{algorithm} evaluation needs a checkpoint")
        cfg = ExperimentConfig(scenario=scenario or ScenarioConfig(), algorithm="random")
        return evaluate(cfg, Networks(), cfg.scenario, episodes)
    cfg, nets = load_checkpoint(checkpoint)
    if algorithm is not None and algorithm != cfg.algorithm:
        raise CheckpointError(f"checkpoint holds {cfg.algorithm}, not {algorithm}")
    scenario = scenario or cfg.scenario
    if nets.global_net is not None and spec_of(nets.global_net).n_agents != scenario.n_agents:
        raise CheckpointError(
            f"checkpoint was trained for {spec_of(nets.global_net).n_agents} agents, "
            f"scenario has {scenario.n_agents}"
        )
    return evaluate(cfg, nets, scenario, episodes)


def write_metrics(path: str | Path, rows: list[tuple], key: str = "run") -> None:
    _write_csv(Path(path), (key,) + METRIC_COLUMNS, rows)


# ---------------------------------------------------------------- ablation and sweeps


def ablation_configs(cfg: ExperimentConfig) -> dict[str, ExperimentConfig]:
    if cfg.algorithm != "mqlc":
        raise ConfigError("ablations are defined for mqlc")
    base = replace(cfg, **{k: False for k in ABLATIONS})
    out = {"full": base}
    for flag in ABLATIONS:
        out[flag] = replace(base, **{flag: True})
    return out


def cmd_ablate(cfg: ExperimentConfig, out_dir: str | Path,
               variants: list[str] | None = None) -> dict[str, EvalMetrics]:
    """Train and evaluate full MQLC and each single-flag ablation on one seed."""
    out = Path(out_dir)
    configs = ablation_configs(cfg)
    variants = variants or list(configs)
    unknown = set(variants) - set(configs)
    if unknown:
        raise ConfigError(f"unknown ablation variant(s): {', '.join(sorted(unknown))}")
    predictor = ensure_predictor(configs["full"])
    results = {}
    for name in variants:
        c = configs[name]
        res = cmd_train(c, out / name, predictor=predictor if c.uses_intent else None)
        results[name] = evaluate(c, res.networks)
    write_metrics(out / "ablation.csv", [(k,) + m.row() for k, m in results.items()], "variant")
    return results


SWEEP_PARAMETERS = {"lam": "lam", "lambda": "lam", "epsilon": "epsilon", "eps": "epsilon"}
SWEEP_COLUMNS = ("value", "runs", "mean_total_reward", "min_total_reward", "max_total_reward",
                 "mean_episode_length", "mean_speed", "crash_rate")
CURVE_COLUMNS = ("value", "episode", "mean_reward", "min_reward", "max_reward")


def cmd_sweep(parameter: str, values, cfg: ExperimentConfig, out_dir: str | Path,
              seeds: int = 5) -> list[tuple]:
    """One train+eval per (value, seed); summary.csv, runs.csv and curves.csv."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose lam or epsilon")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    name = SWEEP_PARAMETERS[parameter]
    out = Path(out_dir)
    summary, runs, curves = [], [], []
    for value in values:
        metrics, rewards = [], []
        for k in range(seeds):
            c = replace(cfg, **{name: float(value)}, seed=cfg.seed + k,
                        scenario=cfg.scenario.with_seed(cfg.seed + k))
            res = cmd_train(c, out / f"{name}_{value}" / f"seed_{c.seed}")
            m = evaluate(c, res.networks)
            metrics.append(m)
            rewards.append([s.total_reward for s in res.episodes])
            runs.append((value, c.seed) + m.row())
        r = np.array([m.mean_total_reward for m in metrics])
        summary.append((value, len(metrics), float(r.mean()), float(r.min()), float(r.max()),
                        float(np.mean([m.mean_episode_length for m in metrics])),
                        float(np.mean([m.mean_speed for m in metrics])),
                        float(np.mean([m.crash_rate for m in metrics]))))
        curve = np.array(rewards)
        for ep in range(curve.shape[1]):
            col = curve[:, ep]
            curves.append((value, ep + 1, float(col.mean()), float(col.min()), float(col.max())))
    _write_csv(out / "summary.csv", SWEEP_COLUMNS, summary)
    _write_csv(out / "runs.csv", ("value", "seed") + METRIC_COLUMNS, runs)
    _write_csv(out / "curves.csv", CURVE_COLUMNS, curves)
    return summary


def urgency_histogram(values) -> list[tuple]:
    """(low, high, count, proportion) per urgency bin."""
    values = np.asarray(list(values), dtype=np.float64)
    edges = URGENCY_BINS
    counts = [int(np.sum((values >= lo) & (values < hi))) for lo, hi in zip(edges[:-1], edges[1:])]
    total = max(len(values), 1)
    return [(lo, hi, c, c / total) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def cmd_urgency_histogram(cfg: ExperimentConfig, out_dir: str | Path,
                          ticks: int | None = None) -> list[tuple]:
    """Record per-agent urgencies during an mqlc training run and bin them."""
    if cfg.algorithm != "mqlc":
        raise ConfigError("urgency histogram needs an mqlc configuration")
    values: list[float] = []
    cmd_train(cfg, out_dir, urgencies=values)
    if ticks is not None:
        values = values[: ticks * cfg.scenario.n_agents]
    rows = urgency_histogram(values)
    _write_csv(Path(out_dir) / "urgency_histogram.csv", ("low", "high", "count", "proportion"), rows)
    return rows
