import numpy as np
import pytest

from r3l.bc import clone_policy
from r3l.envs import make_env
from r3l.planner import ExploreConfig, collect_demos
from r3l.steering import make_steering


@pytest.fixture(scope="session")
def mc_demos():
    """Ten learned-steering demonstrations on mountain car."""
    env = make_env("mountaincar")
    cfg = ExploreConfig(budget=10_000, goal_bias=0.05, seed=1234)
    return collect_demos(env, lambda e, r: make_steering("learned", e, r), cfg, 10)


@pytest.fixture(scope="session")
def mc_cloned(mc_demos):
    env = make_env("mountaincar")
    policy, curve = clone_policy(env, mc_demos, rng=np.random.default_rng(99))
    return policy, curve


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; fails the test when the check does not hold."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number, description, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {description}"
        if detail:
            line += f" [{detail}]"
        lines.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
