"""End-to-end acceptance checks; each test maps to one numbered criterion.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import itertools
from dataclasses import replace

import numpy as np
import pytest

from conftest import constant_qnet, ego_obs, ego_x_qnet, jitter_biases
from lanemix import autodiff as ad
from lanemix import decision as dc
from lanemix import harness as H
from lanemix import intent
from lanemix import learner as ln
from lanemix.decision import QNetSpec
from lanemix.learner import Batch, LearnerConfig
from lanemix.observation import PRESENCE, VX, observe
from lanemix.sim import Kind, RoadConfig, ScenarioConfig, VehicleState, init_scenario, reward

criterion = pytest.mark.criterion


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# ---------------------------------------------------------------- 1


def oracle_reward(lane, vx, crashed, lanes=6, v_min=20.0, v_max=30.0):
    penalty = -1.0 if crashed else 0.0
    lane_term = lane / lanes
    speed_term = (np.clip(vx, v_min, v_max) - v_min) / (v_max - v_min)
    return 1.0 * penalty + 0.1 * lane_term + 0.4 * speed_term


@criterion(1, "reward matches an independent oracle on 200 random tuples")
def test_reward_oracle(request):
    road, cfg = RoadConfig(), ScenarioConfig()
    rng = np.random.default_rng(2024)
    cases = [(6, 20.0, True, -0.9), (6, 30.0, False, 0.5), (1, 20.0, False, 1 / 60)]
    for _ in range(200):
        cases.append((int(rng.integers(1, 7)), float(rng.uniform(10, 40)), bool(rng.random() < 0.3),
                      None))
    worst = 0.0
    for lane, vx, crashed, expected in cases:
        car = VehicleState(0, Kind.AGENT, lane, 100.0, road.lane_center(lane), vx)
        got = reward(car, crashed, road, cfg)
        want = oracle_reward(lane, vx, crashed) if expected is None else expected
        worst = max(worst, abs(got - want))
    detail(request, f"{len(cases)} cases, max abs diff {worst:.2e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------- 2


def _random_obs(rng, rows, features):
    x = rng.uniform(-1, 1, (2, rows, features))
    x[..., PRESENCE] = (rng.random((2, rows)) < 0.75).astype(float)
    x[:, ::5, PRESENCE] = 1.0
    return x


@criterion(2, "gradient check on predictor and both Q heads, 10 seeds")
def test_gradient_correctness(request):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pred = jitter_biases(intent.init_predictor(5, 3, hidden=256, seed=seed), seed)
        pos = rng.uniform(-1, 1, (2, 3, 5, 2))
        pres = (rng.random((2, 3, 5)) < 0.8).astype(float)
        pres[:, :, 0] = 1.0
        target = rng.normal(size=(2, 5, 2))
        mask = pres[:, -1]
        nets = [(pred, lambda p=pred: intent.masked_mse(intent.predictor_forward(p, pos, pres),
                                                        target, mask))]
        for spec in (QNetSpec(5, 7, 5, 1, hidden=256), QNetSpec(10, 7, 25, 2, hidden=256)):
            q = jitter_biases(dc.init_qnet(spec, seed), seed + 100)
            x = _random_obs(rng, spec.rows, spec.features)
            y = rng.normal(size=(2, spec.outputs))
            nets.append((q, lambda q=q, x=x, y=y: ad.mse(dc.q_forward(q, x), y)))
        for params, fn in nets:
            report = ad.grad_check(fn, params, tolerance=1e-4, max_per_param=12,
                                   rng=np.random.default_rng(seed))
            worst = max(worst, report.max_rel_error)
    detail(request, f"max relative error {worst:.2e}")
    assert worst < 1e-4


# ---------------------------------------------------------------- 3


GAMMA = 0.8


def _ind_batch(obs, a, r, done):
    obs = np.asarray(obs, float)
    return Batch(obs, np.asarray(a), np.asarray(r, float), obs.copy(), np.asarray(done, float))


def _glo_batch(states, a, r, done):
    states = np.asarray(states, float)
    return Batch(states, np.asarray(a), np.asarray(r, float), states.copy(),
                 np.asarray(done, float))


def _ego_x_q(x, at_zero, slope):
    return np.asarray(at_zero) + max(x, 0.0) * np.asarray(slope)


@criterion(3, "TD targets, regularizer and total loss match hand values")
def test_td_and_loss_oracles(request):
    worst = 0.0

    def check(got, want):
        nonlocal worst
        worst = max(worst, float(np.max(np.abs(np.asarray(got) - np.asarray(want)))))

    # individual TD target
    q_const = np.array([0.2, 1.0, -0.5, 0.3, 0.0])
    net = constant_qnet(q_const)
    for r, done, gamma in [([0.5], [0], 0.8), ([0.5, -1.0, 0.1], [1, 0, 1], 0.8),
                           ([0.3, -0.2], [0, 0], 0.0)]:
        obs = np.stack([ego_obs()] * len(r))
        got = ln.td_target_individual(_ind_batch(obs, [0] * len(r), r, done), net, gamma)
        want = [ri if d else ri + gamma * 1.0 for ri, d in zip(r, done)]
        check(got, want)
    check(ln.td_target_individual(_ind_batch([ego_obs()], [0], [0.5], [0]), net, 0.8), [1.3])

    # global TD target: agent 0 sits at x = 0, agent 1 at x = xs
    at_zero, slope = [0, 1, 0, 0, 0], [0, 0, 0, 2, 0]
    ind_t = ego_x_qnet(at_zero, slope)
    q_glo = np.random.default_rng(0).normal(size=25)
    q_glo[8] = 2.0
    glo_t = constant_qnet(q_glo, rows=10, n_agents=2)
    for xs, r, done in [([1.0], [0.0], [0]), ([1.0, 0.2, 0.9], [0.4, -0.3, 0.7], [0, 0, 1]),
                        ([0.4, 0.6], [1.0, 1.0], [1, 0])]:
        states = [np.concatenate([ego_obs(0.0), ego_obs(x)]) for x in xs]
        got = ln.td_target_global(_glo_batch(states, [0] * len(xs), r, done), glo_t, ind_t,
                                  GAMMA, 2)
        want = []
        for x, ri, d in zip(xs, r, done):
            a0 = int(np.argmax(_ego_x_q(0.0, at_zero, slope)))
            a1 = int(np.argmax(_ego_x_q(x, at_zero, slope)))
            want.append(ri if d else ri + GAMMA * q_glo[a0 * 5 + a1])
        check(got, want)
    check(ln.td_target_global(_glo_batch([np.concatenate([ego_obs(0), ego_obs(1)])], [0], [0.0], [0]),
                              glo_t, ind_t, GAMMA, 2), [1.6])

    # regularizer
    q_ind = np.array([1.0, 2.0, -0.5, 0.25, 3.0])
    ind = constant_qnet(q_ind)
    for joints, gvals in [([(0, 1)], [2.0]), ([(0, 1), (4, 2), (3, 3)], [1.5, 0.0, -1.0]),
                          ([(2, 4), (1, 0)], [0.7, 1.5])]:
        qg = np.zeros(25)
        for j, g in zip(joints, gvals):
            qg[dc.encode_joint(j)] = g
        glo = constant_qnet(qg, rows=10, n_agents=2)
        states = [np.zeros((10, 5))] * len(joints)
        batch = _glo_batch(states, [dc.encode_joint(j) for j in joints], [0.0] * len(joints),
                           [0] * len(joints))
        got = ln.loss_regularizer(batch, glo, ind, [0.5, 0.5]).item()
        want = np.mean([(g - 0.5 * q_ind[a] - 0.5 * q_ind[b]) ** 2 for (a, b), g in zip(joints, gvals)])
        check(got, want)
    one = constant_qnet(np.where(np.arange(25) == 1, 2.0, 0.0), rows=10, n_agents=2)
    check(ln.loss_regularizer(_glo_batch([np.zeros((10, 5))], [1], [0], [0]), one, ind, [0.5, 0.5]).item(),
          0.25)

    # total loss with constant heads
    for seed in range(3):
        rng = np.random.default_rng(seed)
        qi, qg = rng.normal(size=5), rng.normal(size=25)
        learner = ln.Learner(constant_qnet(qi), constant_qnet(qg, rows=10, n_agents=2), 2,
                             LearnerConfig(lam=0.3))
        b = 4
        a_i = rng.integers(0, 5, b)
        a_g = rng.integers(0, 25, b)
        r_i, r_g = rng.normal(size=b), rng.normal(size=b)
        d = (rng.random(b) < 0.5).astype(float)
        b_ind = _ind_batch(np.zeros((b, 5, 5)), a_i, r_i, d)
        b_glo = _glo_batch(np.zeros((b, 10, 5)), a_g, r_g, d)
        l_ind, l_glo, l_reg, total = (t.item() for t in learner.losses(b_ind, b_glo))
        y_i = r_i + GAMMA * (1 - d) * qi.max()
        star = int(np.argmax(qi))
        y_g = r_g + GAMMA * (1 - d) * qg[star * 5 + star]
        want_ind = np.mean((qi[a_i] - y_i) ** 2)
        want_glo = np.mean((qg[a_g] - y_g) ** 2)
        want_reg = np.mean((qg[a_g] - 0.5 * qi[a_g // 5] - 0.5 * qi[a_g % 5]) ** 2)
        check([l_ind, l_glo, l_reg, total],
              [want_ind, want_glo, want_reg, want_glo + want_ind + 0.3 * want_reg])
    detail(request, f"max abs diff {worst:.2e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------- 4


@criterion(4, "arbitration equals brute force on 1000 instances")
def test_arbitration_equivalence(request):
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(1000):
        n = int(rng.choice([2, 3]))
        q = rng.normal(size=5 ** n)
        if i % 10 == 0:
            sets = [list(range(5))] * n
        else:
            sets = [sorted(rng.choice(5, size=int(rng.integers(1, 6)), replace=False).tolist())
                    for _ in range(n)]
        best = max(itertools.product(*sets), key=lambda t: q[dc.encode_joint(t)])
        got, evaluated = dc.arbitrate_values(q, sets)
        mismatches += got.actions != best
        mismatches += evaluated != int(np.prod([len(s) for s in sets]))
        if i % 10 == 0:
            mismatches += got.index != int(np.argmax(q))
    detail(request, f"{mismatches} mismatches")
    assert mismatches == 0


# ---------------------------------------------------------------- 5


def _obs_with_speeds(speeds):
    o = np.zeros((5, 5))
    for row, s in enumerate(speeds):
        o[row, PRESENCE] = 1.0
        o[row, VX] = 2.0 * s - 1.0
    return o


@criterion(5, "urgency and priority on 50 constructed observations")
def test_priority_classification(request):
    cases = [[1.0], [0.5, 0.5, 0.5], [0.0], [0.5, 0.5], [0.75] * 5, [0.0, 1.0],
             [0.25, 0.25, 0.25, 0.25, 0.25], [1.0, 1.0]]
    rng = np.random.default_rng(11)
    while len(cases) < 50:
        cases.append(rng.uniform(0, 1, int(rng.integers(1, 6))).tolist())
    wrong = 0
    boundary = 0
    for speeds in cases:
        s = np.asarray(speeds)
        m, d, var = s.mean(), (len(s) - 1) / 4, s.var()
        want = m + d + 2.0 * var
        got = dc.urgency(_obs_with_speeds(speeds))
        level = dc.priority_of(got, 1.0).level
        wrong += abs(got - want) > 1e-12
        wrong += level != ("high" if want > 1.0 else "low")
        if want == 1.0:
            boundary += 1
            wrong += level != "low"
    detail(request, f"{len(cases)} observations, {boundary} on the boundary, {wrong} wrong")
    assert wrong == 0 and boundary >= 2


# ---------------------------------------------------------------- 6


@criterion(6, "training twice with one seed gives byte-identical CSVs")
def test_determinism(request, tmp_path):
    cfg = H.ExperimentConfig(scenario=ScenarioConfig("sparse"), algorithm="mqlc", episodes=20,
                             hidden=64, seed=3)
    for run in ("a", "b"):
        H.cmd_train(cfg, tmp_path / run)
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("episodes.csv", "losses.csv")]
    rows = len((tmp_path / "a" / "losses.csv").read_text().splitlines()) - 1
    detail(request, f"episodes.csv identical={same[0]}, losses.csv identical={same[1]} ({rows} updates)")
    assert all(same) and rows > 0


# ---------------------------------------------------------------- 7


def _rollout_batches(n_agents_mode="sparse", size=32, seed=0):
    rng = np.random.default_rng(seed)
    ind, glo = [], []
    while len(glo) < size:
        world = init_scenario(ScenarioConfig(n_agents_mode, seed=int(rng.integers(1 << 30))))
        while not world.terminated and len(glo) < size:
            obs = [observe(world, a) for a in world.agent_ids]
            joint = tuple(int(a) for a in rng.integers(0, 5, len(obs)))
            out = world.step(joint)
            nxt = [observe(world, a) for a in world.agent_ids]
            done = any(out.crashed)
            for o, a, r, o2 in zip(obs, joint, out.rewards, nxt):
                ind.append((o, a, r, o2, done))
            glo.append((np.concatenate(obs), dc.encode_joint(joint), out.global_reward,
                        np.concatenate(nxt), done))

    def batch(items):
        return Batch(*(np.array([it[k] for it in items], dtype=float if k != 1 else np.int64)
                       for k in range(5)))
    return batch(ind[:size]), batch(glo)


@criterion(7, "500 updates on a frozen batch cut L_ind by at least 90%")
def test_overfit(request):
    b_ind, b_glo = _rollout_batches()
    spec_i = QNetSpec(5, 5, 5, hidden=64)
    spec_g = QNetSpec(10, 5, 25, 2, hidden=64)
    learner = ln.Learner(dc.init_qnet(spec_i, 0), dc.init_qnet(spec_g, 1), 2,
                         LearnerConfig(target_sync=10**9))
    first = learner.update_on(b_ind, b_glo).loss_ind
    for _ in range(499):
        last = learner.update_on(b_ind, b_glo).loss_ind
    with ad.no_grad():
        final = learner.losses(b_ind, b_glo)[0].item()
    drop = 1 - final / first
    detail(request, f"L_ind {first:.4f} -> {final:.6f} ({drop:.1%} reduction)")
    assert drop >= 0.9


# ---------------------------------------------------------------- 8


@criterion(8, "predictor error on constant-velocity data below 0.05")
def test_predictor_constant_velocity(request):
    train = intent.synthetic_constant_velocity(3000, seed=0)
    held = intent.synthetic_constant_velocity(300, seed=99)
    params, report = intent.train_predictor(train, epochs=30, hidden=64, seed=0)
    x, p, _, m = intent.stack(held)
    oracle = (2.0 * x[:, -1] - x[:, -2]) * m[..., None]
    pred = intent.predict_batch(params, x, p, m)
    err = float((np.linalg.norm(pred - oracle, axis=-1) * m).sum() / m.sum())
    detail(request, f"held-out error {err:.4f} after {len(report.val_loss)} epochs")
    assert len(report.val_loss) <= 50 and err < 0.05


# ---------------------------------------------------------------- 9, 10


DESK = H.ExperimentConfig(scenario=ScenarioConfig("sparse"), algorithm="mqlc", episodes=1500,
                          hidden=64, checkpoint_every=500)


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    results = {"random": H.cmd_eval(None, DESK.scenario, 50)}
    predictor = H.ensure_predictor(DESK)
    for name, cfg in (("full", DESK), ("no_priority", replace(DESK, no_priority=True))):
        res = H.cmd_train(cfg, out / name, predictor=predictor)
        results[name] = H.evaluate(cfg, res.networks, episodes=50)
    return results


@pytest.mark.slow
@criterion(9, "MQLC after 1500 sparse episodes reaches 1.3x the random reward")
def test_learning_signal(request, desk_runs):
    full, rand = desk_runs["full"], desk_runs["random"]
    ratio = full.mean_total_reward / rand.mean_total_reward
    detail(request, f"mqlc {full.mean_total_reward:.3f} vs random {rand.mean_total_reward:.3f}, "
                    f"ratio {ratio:.2f}")
    assert ratio >= 1.3


@pytest.mark.slow
@criterion(10, "no_priority mean episode length is at most full MQLC")
def test_ablation_direction(request, desk_runs):
    full, nop = desk_runs["full"], desk_runs["no_priority"]
    detail(request, f"no_priority {nop.mean_episode_length:.2f} vs full {full.mean_episode_length:.2f}")
    assert nop.mean_episode_length <= full.mean_episode_length
