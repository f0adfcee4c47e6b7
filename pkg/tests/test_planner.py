from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r3l.envs import make_env
from r3l.planner import (
    DemoSet,
    ExplorationFailure,
    ExplorationTree,
    ExploreConfig,
    NoExpandableNodeError,
    _best_node,
    collect_demos,
    explore,
    extract_trajectory,
    nearest,
)
from r3l.steering import make_steering


class LatticeSteering:
    """Uniform choice over {-1, 0, 1}; keeps the double integrator on the lattice."""

    def sample(self, state, target, rng):
        return np.array([float(rng.integers(-1, 2))])

    def update(self, *args):
        pass


def bfs_reachable(env, root, horizon):
    seen = {tuple(root)}
    frontier = deque([(tuple(root), 0)])
    while frontier:
        s, d = frontier.popleft()
        if d == horizon:
            continue
        for a in (-1.0, 0.0, 1.0):
            nxt = tuple(env.transition(np.array(s), [a]).next_state)
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, d + 1))
    return seen


def random_tree(env, n, rng):
    tree = ExplorationTree(env, env.sample_state_uniform(rng))
    for _ in range(n - 1):
        parent = int(rng.integers(len(tree)))
        s = tree.nodes[parent].state
        a = rng.uniform(env.action_low, env.action_high)
        tr = env.transition(s, a)
        tree.add_child(parent, tr.action, tr.next_state, tr.reward)
    return tree


def test_root_in_goal_returns_empty_trajectory():
    env = make_env("mountaincar", start_low=0.5, start_high=0.5)
    steer = make_steering("learned", env, np.random.default_rng(0))
    tree, traj, stats = explore(env, steer, ExploreConfig(budget=100))
    assert len(traj) == 0 and traj.successful
    assert stats.timesteps == 0 and env.n_steps == 0
    assert len(tree) == 1


def test_nearest_matches_brute_force():
    env = make_env("acrobot")
    rng = np.random.default_rng(1)
    tree = random_tree(env, 1000, rng)
    for _ in range(100):
        q = env.sample_state_uniform(rng)
        best, best_d = None, np.inf
        for i, node in enumerate(tree.nodes):
            if node.depth >= env.horizon:
                continue
            d = float(np.sum((env.normalize(node.state) - env.normalize(q)) ** 2))
            if d < best_d:
                best, best_d = i, d
        assert nearest(tree, q) == best


def test_nearest_tie_goes_to_lowest_index():
    env = make_env("pendulum")
    tree = ExplorationTree(env, [0.5, 0.0])
    tree.add_child(0, [0.0], [0.0, 0.0], -1.0)
    tree.add_child(0, [0.0], [0.0, 0.0], -1.0)
    assert nearest(tree, [0.0, 0.0]) == 1


def test_nearest_skips_horizon_nodes():
    env = make_env("double_integrator", horizon=1)
    tree = ExplorationTree(env, [0.0, 0.0])
    child = tree.add_child(0, [1.0], [1.0, 1.0], -1.0)
    assert tree.nodes[child].depth == 1
    assert nearest(tree, [1.0, 1.0]) == 0


def test_no_expandable_node():
    env = make_env("double_integrator", horizon=0)
    tree = ExplorationTree(env, [0.0, 0.0])
    with pytest.raises(NoExpandableNodeError):
        nearest(tree, [0.0, 0.0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_tree_invariants(seed):
    env = make_env("pendulum")
    tree = random_tree(env, 60, np.random.default_rng(seed))
    for i, node in enumerate(tree.nodes[1:], start=1):
        parent = tree.nodes[node.parent]
        assert node.parent < i
        assert node.depth == parent.depth + 1
        assert node.cum_return == pytest.approx(
            parent.cum_return + env.discount ** parent.depth * node.reward, abs=1e-12)
        np.testing.assert_array_equal(
            env.transition(parent.state, node.action_from_parent).next_state, node.state)


@pytest.mark.parametrize("env_id", ["mountaincar", "pendulum"])
def test_extracted_trajectory_consistent_and_replays(env_id):
    env = make_env(env_id)
    steer = make_steering("learned", env, np.random.default_rng(2))
    tree, traj, _ = explore(env, steer, ExploreConfig(budget=3000, seed=2))
    leaf = int(np.argmax(tree.depths))
    path = extract_trajectory(tree, leaf)
    assert len(path) == tree.nodes[leaf].depth
    assert path.discounted_return(env.discount) == pytest.approx(
        tree.nodes[leaf].cum_return, abs=1e-10)
    for t in (traj, path):
        state = t.states[0]
        for k, a in enumerate(t.actions):
            tr = env.transition(state, a)
            assert tr.reward == t.rewards[k]
            state = tr.next_state
            np.testing.assert_array_equal(state, t.states[k + 1])


def test_lattice_reachability_equals_bfs():
    env = make_env("double_integrator", horizon=50)
    cfg = ExploreConfig(budget=4000, goal_bias=0.0, steering_mode="random", seed=3)
    tree, _, _ = explore(env, LatticeSteering(), cfg, root=np.zeros(2))
    found = {tuple(n.state) for n in tree.nodes}
    assert found == bfs_reachable(env, (0.0, 0.0), 50)


def test_short_horizon_tree_within_bfs_set():
    env = make_env("double_integrator", horizon=3)
    cfg = ExploreConfig(budget=500, goal_bias=0.0, steering_mode="random", seed=4)
    tree, _, _ = explore(env, LatticeSteering(), cfg, root=np.zeros(2))
    assert tree.depths.max() <= 3
    assert {tuple(n.state) for n in tree.nodes} <= bfs_reachable(env, (0.0, 0.0), 3)


def test_zero_goal_bias_never_samples_goal(monkeypatch):
    env = make_env("mountaincar")

    def forbidden(rng):
        raise AssertionError("goal sampler called with p_g = 0")

    monkeypatch.setattr(env, "sample_goal_state", forbidden)
    steer = make_steering("random", env, None)
    explore(env, steer, ExploreConfig(budget=500, goal_bias=0.0, steering_mode="random"))


def test_full_goal_bias_only_samples_goal(monkeypatch):
    env = make_env("mountaincar")
    monkeypatch.setattr(env, "sample_state_uniform",
                        lambda rng: (_ for _ in ()).throw(AssertionError("uniform sampled")))
    steer = make_steering("random", env, None)
    explore(env, steer, ExploreConfig(budget=200, goal_bias=1.0, steering_mode="random"),
            root=np.array([-0.5, 0.0]))


def test_budget_counts_interactions():
    env = make_env("pendulum")
    steer = make_steering("random", env, None)
    tree, _, stats = explore(env, steer, ExploreConfig(budget=321, steering_mode="random"))
    assert stats.timesteps == 321 == env.n_steps
    assert len(tree) == 322


def test_best_goal_node_is_shallowest():
    env = make_env("mountaincar", start_low=0.3, start_high=0.3)
    steer = make_steering("random", env, None)
    cfg = ExploreConfig(budget=3000, steering_mode="random", seed=5, stop_at_goal=False)
    tree, traj, _ = explore(env, steer, cfg)
    goal = [i for i, n in enumerate(tree.nodes) if env.in_goal(n.state)]
    assert goal
    best = _best_node(tree)
    assert best in goal
    assert tree.nodes[best].depth == min(tree.nodes[i].depth for i in goal)
    assert traj.successful and len(traj) == tree.nodes[best].depth


def test_collect_demos_distinct_roots(tmp_path):
    env = make_env("mountaincar")
    cfg = ExploreConfig(budget=10_000, seed=6)
    demos = collect_demos(env, lambda e, r: make_steering("learned", e, r), cfg, 10)
    roots = {tuple(t.states[0]) for t in demos.trajectories}
    assert len(roots) == 10
    assert all(t.successful for t in demos.trajectories)
    assert demos.timesteps == env.n_steps
    demos.save(tmp_path / "demos.jsonl")
    back = DemoSet.load(tmp_path / "demos.jsonl")
    assert back.seeds == demos.seeds and back.timesteps == demos.timesteps
    for a, b in zip(back.trajectories, demos.trajectories):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)


def test_collect_demos_retry_cap():
    env = make_env("mountaincar")
    cfg = ExploreConfig(budget=1, seed=7)
    with pytest.raises(ExplorationFailure) as err:
        collect_demos(env, lambda e, r: make_steering("learned", e, r), cfg, 2, max_retries=3)
    assert len(err.value.stats) == 3


def test_explore_reproducible():
    out = []
    for _ in range(2):
        env = make_env("pendulum")
        steer = make_steering("learned", env, np.random.default_rng(8))
        _, traj, stats = explore(env, steer, ExploreConfig(budget=800, seed=8))
        out.append((traj.states, stats.timesteps))
    np.testing.assert_array_equal(out[0][0], out[1][0])
    assert out[0][1] == out[1][1]


@pytest.mark.parametrize("kwargs", [dict(budget=0), dict(goal_bias=1.5),
                                    dict(steering_mode="greedy")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ExploreConfig(**kwargs)
