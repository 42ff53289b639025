import numpy as np
import pytest

from lanemix import decision as dc
from lanemix.decision import QNetSpec


def constant_qnet(values, rows=5, features=5, n_agents=1):
    """Q-network whose output is ``values`` for every input."""
    values = np.asarray(values, dtype=float)
    p = dc.init_qnet(QNetSpec(rows, features, len(values), n_agents, hidden=4), 0)
    p["head_w"].data = np.zeros_like(p["head_w"].data)
    p["head_b"].data = values.copy()
    return p


def ego_x_qnet(q_at_zero, q_slope):
    """Individual net with Q(o) = q_at_zero + ego_x(o) * q_slope.

    No feature branches; hidden unit 0 carries the ego x, unit 1 the ego presence.
    """
    p = dc.init_qnet(QNetSpec(5, 5, 5, hidden=2, branches=False), 0)
    w1 = np.zeros((25, 2))
    w1[1, 0] = 1.0   # row 0, column x
    w1[0, 1] = 1.0   # row 0, presence
    p["ori1_w"].data = w1
    p["ori1_b"].data = np.zeros(2)
    p["ori2_w"].data = np.eye(2)
    p["ori2_b"].data = np.zeros(2)
    p["head_w"].data = np.stack([np.asarray(q_slope, float), np.asarray(q_at_zero, float)])
    p["head_b"].data = np.zeros(5)
    return p


def ego_obs(x=0.0):
    o = np.zeros((5, 5))
    o[0, 0] = 1.0
    o[0, 1] = x
    return o


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def jitter_biases(params, seed=0, scale=0.1):
    """Move zero-initialised biases off the ReLU kink so finite differences are valid."""
    rng = np.random.default_rng(seed)
    for name, p in params.items():
        if name.endswith("_b"):
            p.data = p.data + rng.normal(scale=scale, size=p.data.shape)
    return params


# ---------------------------------------------------------------- acceptance report

_VERDICTS = "acceptance_verdicts"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    setattr(config, _VERDICTS, {})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    getattr(item.config, _VERDICTS)[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = getattr(config, _VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        title, status, detail = verdicts[number]
        line = f"[{status}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
