import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constant_qnet, ego_obs, ego_x_qnet, jitter_biases
from lanemix import autodiff as ad
from lanemix import decision as dc
from lanemix import learner as ln
from lanemix.decision import QNetSpec
from lanemix.learner import Batch, GloTransition, IndTransition, LearnerConfig, ReplayBuffer


def ind_batch(r, done, n=None, x=None):
    r = np.atleast_1d(np.asarray(r, float))
    b = len(r)
    obs = np.stack([ego_obs()] * b) if x is None else x
    return Batch(obs, np.zeros(b, dtype=np.int64), r, obs.copy(), np.asarray(done, float) * np.ones(b))


def glo_batch(r, done, joint, n_agents=2, xs=(0.0, 1.0)):
    r = np.atleast_1d(np.asarray(r, float))
    b = len(r)
    s = np.concatenate([ego_obs(x) for x in xs[:n_agents]])
    states = np.stack([s] * b)
    return Batch(states, np.full(b, joint, dtype=np.int64), r, states.copy(),
                 np.asarray(done, float) * np.ones(b))


# ---------------------------------------------------------------- replay buffer


def test_buffer_fifo_sentinels():
    buf = ReplayBuffer(capacity=10, seed=0)
    for i in range(13):
        buf.push(i)
    assert len(buf) == 10
    assert buf.items() == list(range(3, 13))


@given(st.integers(1, 40), st.integers(0, 100))
def test_buffer_size_bound(capacity, inserts):
    buf = ReplayBuffer(capacity)
    for i in range(inserts):
        buf.push(i)
    assert len(buf) == min(capacity, inserts)


def test_buffer_sample_without_replacement():
    buf = ReplayBuffer(50, seed=1)
    for i in range(50):
        buf.push(i)
    for _ in range(20):
        batch = buf.sample(32)
        assert len(set(batch)) == 32


def test_buffer_sample_too_large():
    buf = ReplayBuffer(5)
    buf.push(1)
    with pytest.raises(ValueError):
        buf.sample(2)


def test_buffer_seeded():
    def draw():
        b = ReplayBuffer(20, seed=4)
        for i in range(20):
            b.push(i)
        return [b.sample(5) for _ in range(3)]
    assert draw() == draw()


# ---------------------------------------------------------------- targets


def test_td_individual_example():
    target = constant_qnet([0.2, 1.0, -0.5, 0.3, 0.0])
    y = ln.td_target_individual(ind_batch(0.5, False), target, 0.8)
    assert y[0] == pytest.approx(1.3, abs=1e-12)


def test_td_individual_terminal_and_zero_gamma():
    target = constant_qnet([0.2, 1.0, -0.5, 0.3, 0.0])
    assert ln.td_target_individual(ind_batch(0.5, True), target, 0.8)[0] == 0.5
    y = ln.td_target_individual(ind_batch([0.1, -0.4, 0.7], False), target, 0.0)
    np.testing.assert_array_equal(y, [0.1, -0.4, 0.7])


def test_td_double_equals_dqn_when_argmaxes_agree():
    net = constant_qnet([0.2, 1.0, -0.5, 0.3, 0.0])
    batch = ind_batch([0.3, 0.1], [False, True])
    np.testing.assert_array_equal(ln.td_target_double(batch, net, net, 0.8),
                                  ln.td_target_individual(batch, net, 0.8))


def test_td_double_uses_online_choice():
    online = constant_qnet([0, 0, 0, 1.0, 0])
    target = constant_qnet([5.0, 0, 0, 2.0, 0])
    y = ln.td_target_double(ind_batch(0.0, False), online, target, 0.5)
    assert y[0] == pytest.approx(1.0)


def test_td_global_joint_index_and_value():
    # agent 0 (ego x = 0) prefers idle, agent 1 (ego x = 1) prefers faster
    ind_target = ego_x_qnet([0, 1, 0, 0, 0], [0, 0, 0, 2, 0])
    picks = ln.greedy_joint(ind_target, glo_batch(0.0, False, 0).x_next, 2)
    assert picks[0] == 1 * 5 + 3
    q = np.zeros(25)
    q[8] = 2.0
    glo_target = constant_qnet(q, rows=10, n_agents=2)
    y = ln.td_target_global(glo_batch(0.0, False, 0), glo_target, ind_target, 0.8, 2)
    assert y[0] == pytest.approx(1.6, abs=1e-12)
    y_done = ln.td_target_global(glo_batch(0.7, True, 0), glo_target, ind_target, 0.8, 2)
    assert y_done[0] == 0.7


# ---------------------------------------------------------------- losses


def test_loss_individual_examples():
    net = constant_qnet([1.0, 0, 0, 0, 0])
    batch = ind_batch(0.0, False)
    assert ln.loss_individual(batch, net, np.array([1.0])).item() == 0.0
    assert ln.loss_individual(batch, net, np.array([1.3])).item() == pytest.approx(0.09, abs=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_loss_individual_non_negative(targets):
    net = constant_qnet([0.3, -0.2, 0.1, 0.0, 0.4])
    batch = ind_batch(np.zeros(len(targets)), False)
    assert ln.loss_individual(batch, net, np.array(targets)).item() >= 0.0


def test_regularizer_examples():
    # joint (0, 1): Q_1(a=0) = 1, Q_2(a=1) = 2 -> weighted sum 1.5
    ind = constant_qnet([1.0, 2.0, 0, 0, 0])
    q = np.zeros(25)
    q[dc.encode_joint((0, 1))] = 2.0
    glo = constant_qnet(q, rows=10, n_agents=2)
    batch = glo_batch(0.0, False, dc.encode_joint((0, 1)))
    assert ln.loss_regularizer(batch, glo, ind, [0.5, 0.5]).item() == pytest.approx(0.25, abs=1e-12)
    q[dc.encode_joint((0, 1))] = 1.5
    glo = constant_qnet(q, rows=10, n_agents=2)
    assert ln.loss_regularizer(batch, glo, ind, [0.5, 0.5]).item() == 0.0


@given(st.floats(0.1, 10))
def test_regularizer_scales_quadratically(c):
    ind_vals = np.array([0.4, -1.2, 0.3, 0.9, 0.1])
    glo_vals = np.random.default_rng(0).normal(size=25)
    batch = glo_batch([0.0, 0.0], False, 7)
    base = ln.loss_regularizer(batch, constant_qnet(glo_vals, 10, n_agents=2),
                               constant_qnet(ind_vals), [0.5, 0.5]).item()
    scaled = ln.loss_regularizer(batch, constant_qnet(c * glo_vals, 10, n_agents=2),
                                 constant_qnet(c * ind_vals), [0.5, 0.5]).item()
    assert scaled == pytest.approx(c * c * base, rel=1e-10)


def _random_batches(rng, n_agents=2, b=8, features=5):
    rows = 5 * n_agents
    x = rng.uniform(-1, 1, (b, rows, features))
    x[..., 0] = (rng.random((b, rows)) < 0.7).astype(float)
    x[:, ::5, 0] = 1.0
    xn = x + rng.normal(scale=0.05, size=x.shape)
    xn[..., 0] = x[..., 0]
    glo = Batch(x, rng.integers(0, 5 ** n_agents, b), rng.normal(size=b), xn,
                (rng.random(b) < 0.2).astype(float))
    ind = Batch(x[:, :5], rng.integers(0, 5, b), rng.normal(size=b), xn[:, :5], glo.done)
    return ind, glo


def _learner(kind="mqlc", lam=0.3, n_agents=2, hidden=8, seed=0, **kw):
    ind = dc.init_qnet(QNetSpec(5, 5, 5, hidden=hidden, dueling=kind == "d3qn"), seed)
    glo = dc.init_qnet(QNetSpec(5 * n_agents, 5, 5 ** n_agents, n_agents, hidden=hidden), seed + 1)
    return ln.Learner(ind, glo, n_agents, LearnerConfig(kind=kind, lam=lam, **kw))


def test_total_loss_decomposition():
    rng = np.random.default_rng(3)
    learner = _learner()
    b_ind, b_glo = _random_batches(rng)
    report = learner.update_on(b_ind, b_glo)
    expected = report.loss_glo + report.loss_ind + 0.3 * report.loss_reg
    assert abs(report.loss_total - expected) <= 1e-12


def test_regularizer_gradient_reaches_individual():
    rng = np.random.default_rng(4)
    learner = _learner()
    _, b_glo = _random_batches(rng)
    learner.individual.zero_grad()
    loss = ln.loss_regularizer(b_glo, learner.global_net, learner.individual, learner.k_weights)
    assert loss.item() > 0
    ad.backward(loss)
    assert np.abs(learner.individual["head_w"].grad).sum() > 0
    assert np.abs(learner.global_net["head_w"].grad).sum() > 0


def test_regularizer_gradient_finite_differences():
    rng = np.random.default_rng(5)
    learner = _learner(hidden=4)
    jitter_biases(learner.individual, 1)
    jitter_biases(learner.global_net, 2)
    _, b_glo = _random_batches(rng, b=4)
    both = ad.ParameterSet("both")
    for prefix, p in (("i", learner.individual), ("g", learner.global_net)):
        for k, v in p.items():
            both._params[f"{prefix}.{k}"] = v
    fn = lambda: ln.loss_regularizer(b_glo, learner.global_net, learner.individual, learner.k_weights)
    report = ad.grad_check(fn, both, tolerance=1e-4, max_per_param=20)
    assert report.passed, report


def test_lambda_zero_decouples_heads():
    rng = np.random.default_rng(6)
    b_ind, b_glo = _random_batches(rng)
    joint = _learner("mqlc", lam=0.0)
    solo = _learner("dqn", lam=0.0)
    r1 = joint.update_on(b_ind, b_glo)
    r2 = solo.update_on(b_ind, None)
    assert joint.individual.equals(solo.individual)
    assert r1.loss_ind == r2.loss_ind


def test_update_is_deterministic():
    def one():
        rng = np.random.default_rng(7)
        learner = _learner()
        learner.update_on(*_random_batches(rng))
        return learner
    a, b = one(), one()
    assert a.individual.equals(b.individual) and a.global_net.equals(b.global_net)


def test_target_sync_schedule():
    rng = np.random.default_rng(8)
    learner = _learner(target_sync=5)
    frozen = learner.ind_target.clone()
    batches = _random_batches(rng)
    for step in range(1, 11):
        learner.update_on(*batches)
        if step % 5 == 0:
            assert learner.ind_target.equals(learner.individual)
            assert learner.glo_target.equals(learner.global_net)
            frozen = learner.ind_target.clone()
        else:
            assert learner.ind_target.equals(frozen)
            assert not learner.ind_target.equals(learner.individual)


def test_update_skips_without_data():
    learner = _learner()
    ind, glo = ReplayBuffer(100), ReplayBuffer(100)
    for _ in range(10):
        ind.push(IndTransition(ego_obs(), 1, 0.0, ego_obs(), False))
        glo.push(GloTransition(np.zeros((10, 5)), 3, 0.0, np.zeros((10, 5)), False))
    assert learner.update(ind, glo) is None


def test_update_from_buffers():
    learner = _learner()
    rng = np.random.default_rng(9)
    ind, glo = ReplayBuffer(100, 1), ReplayBuffer(100, 2)
    b_ind, b_glo = _random_batches(rng, b=40)
    for i in range(40):
        ind.push(IndTransition(b_ind.x[i], int(b_ind.a[i]), b_ind.r[i], b_ind.x_next[i], bool(b_ind.done[i])))
        glo.push(GloTransition(b_glo.x[i], int(b_glo.a[i]), b_glo.r[i], b_glo.x_next[i], bool(b_glo.done[i])))
    report = learner.update(ind, glo)
    assert report is not None and report.update_index == 1
    assert len(report.row()) == len(ln.LOSS_COLUMNS)


def test_overfit_one_batch_decreases():
    rng = np.random.default_rng(10)
    # frozen targets make the regression target fixed
    learner = _learner(hidden=16, lr_ind=1e-3, target_sync=10**9)
    batches = _random_batches(rng, b=16)
    first = learner.update_on(*batches).loss_ind
    for _ in range(200):
        last = learner.update_on(*batches).loss_ind
    assert last < 0.5 * first


@pytest.mark.parametrize("kind", ["dqn", "double_dqn", "d3qn", "qcombo", "mqlc"])
def test_every_kind_updates(kind):
    rng = np.random.default_rng(11)
    learner = _learner(kind)
    before = learner.individual.clone()
    b_ind, b_glo = _random_batches(rng)
    learner.update_on(b_ind, b_glo if learner.joint else None)
    assert not learner.individual.equals(before)
    assert learner.joint == (kind in ("mqlc", "qcombo"))


def test_unknown_kind():
    with pytest.raises(ValueError):
        _learner("sarsa")


# ---------------------------------------------------------------- learning rate


def test_dynamic_lr_improving_unchanged():
    st_ = ln.TrainState()
    losses = list(np.linspace(2.0, 1.0, 1000))
    assert ln.dynamic_lr_step(st_, losses).lr_glo == 5e-3


def test_dynamic_lr_flat_halves_once():
    st_ = ln.TrainState()
    ln.dynamic_lr_step(st_, [1.0] * 1000)
    assert st_.lr_glo == 2.5e-3


def test_dynamic_lr_floor():
    st_ = ln.TrainState(lr_glo=1e-5)
    assert ln.dynamic_lr_step(st_, [1.0] * 1000).lr_glo == 1e-5
    st_ = ln.TrainState(lr_glo=1.5e-5)
    assert ln.dynamic_lr_step(st_, [1.0] * 1000).lr_glo == 1e-5


def test_dynamic_lr_needs_two_windows():
    st_ = ln.TrainState()
    assert ln.dynamic_lr_step(st_, [1.0] * 999).lr_glo == 5e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 10), st.floats(-1e-2, 1e-2))
def test_learning_rates_non_increasing(seed, level, trend):
    noise = np.random.default_rng(seed).uniform(0, 0.5, 1000)
    losses = np.clip(level + trend * np.arange(1000) + noise, 0, None)
    st_ = ln.TrainState()
    before = (st_.lr_ind, st_.lr_glo)
    ln.dynamic_lr_step(st_, losses)
    assert st_.lr_ind == before[0] and 0 < st_.lr_glo <= before[1]


def test_learner_halves_lr_on_plateau():
    rng = np.random.default_rng(12)
    learner = _learner(lr_window=5, lr_glo=4e-5, lr_ind=1e-12)
    batches = _random_batches(rng)
    for _ in range(9):
        learner.update_on(*batches)
    assert learner.state.lr_glo == 4e-5
    learner.update_on(*batches)
    # tiny steps leave the global loss flat across the two windows
    assert learner.state.lr_glo == 2e-5
