"""Policy refinement with a KL-constrained natural policy gradient."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bc import PolicyNet

__all__ = [
    "LinearBaseline",
    "RolloutBatch",
    "UpdateStats",
    "collect_rollouts",
    "compute_advantages",
    "conjugate_gradient",
    "discounted_cumsum",
    "pg_update",
    "refine",
    "surrogate",
    "surrogate_grad",
    "write_curve",
]


def discounted_cumsum(rewards, discount):
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + discount * acc
        out[t] = acc
    return out


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    success: bool

    def __len__(self):
        return len(self.rewards)


@dataclass
class RolloutBatch:
    episodes: list
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    log_probs: np.ndarray
    returns_to_go: np.ndarray
    horizon: int

    @property
    def n_steps(self) -> int:
        return len(self.states)

    @property
    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of every episode."""
        return np.array([float(np.sum(e.rewards)) for e in self.episodes])

    @property
    def success_rate(self) -> float:
        return float(np.mean([e.success for e in self.episodes]))


def collect_rollouts(env, policy: PolicyNet, batch_timesteps: int, rng, deterministic=False):
    """Run whole episodes until at least ``batch_timesteps`` steps are collected.

    Episodes are simulated in lockstep waves so the policy is evaluated on a
    batch of states per step.  Stored actions are the unclipped Gaussian
    samples; the environment clips them.
    """
    horizon = env.horizon
    episodes = []
    total = 0
    while total < batch_timesteps:
        n_wave = max(1, -(-(batch_timesteps - total) // horizon))
        states = [env.reset(rng) for _ in range(n_wave)]
        logs = [([], [], []) for _ in range(n_wave)]
        active = list(range(n_wave))
        done_flags = [False] * n_wave
        for _ in range(horizon):
            if not active:
                break
            batch_states = np.array([states[i] for i in active])
            mean = policy.mean_action(batch_states, exact=True)
            if deterministic or policy.sigma == 0.0:
                actions = mean
            else:
                actions = mean + policy.sigma * rng.standard_normal(mean.shape)
            still = []
            for row, i in enumerate(active):
                tr = env.transition(states[i], actions[row])
                s_log, a_log, r_log = logs[i]
                s_log.append(states[i])
                a_log.append(actions[row])
                r_log.append(tr.reward)
                states[i] = tr.next_state
                if tr.done:
                    done_flags[i] = True
                else:
                    still.append(i)
            active = still
        for i in range(n_wave):
            s_log, a_log, r_log = logs[i]
            episodes.append(Episode(np.array(s_log), np.array(a_log), np.array(r_log),
                                    done_flags[i]))
            total += len(r_log)
    return _assemble(episodes, policy, env.discount, horizon)


def _assemble(episodes, policy, discount, horizon):
    states = np.concatenate([e.states for e in episodes])
    actions = np.concatenate([e.actions for e in episodes])
    timesteps = np.concatenate([np.arange(len(e)) for e in episodes])
    rtg = np.concatenate([discounted_cumsum(e.rewards, discount) for e in episodes])
    return RolloutBatch(episodes, states, actions, timesteps, policy.log_prob(states, actions),
                        rtg, horizon)


class LinearBaseline:
    """Least-squares value baseline on ``[s, s^2, t/H, (t/H)^2, (t/H)^3, 1]``.

    States are normalized with the policy's bounds before featurization.
    """

    def __init__(self, policy: PolicyNet, horizon: int, ridge: float = 1e-8):
        self.policy = policy
        self.horizon = horizon
        self.ridge = ridge
        self.coef_ = None

    def features(self, states, timesteps):
        s = self.policy.normalize(np.atleast_2d(states))
        t = np.asarray(timesteps, dtype=float).reshape(-1, 1) / self.horizon
        return np.hstack([s, s ** 2, t, t ** 2, t ** 3, np.ones_like(t)])

    def fit(self, states, timesteps, returns):
        x = self.features(states, timesteps)
        y = np.asarray(returns, dtype=float)
        gram = x.T @ x
        rhs = x.T @ y
        try:
            coef = np.linalg.solve(gram, rhs)
            if not np.all(np.isfinite(coef)) or np.linalg.cond(gram) > 1e14:
                raise np.linalg.LinAlgError("ill-conditioned normal equations")
        except np.linalg.LinAlgError:
            coef = np.linalg.solve(gram + self.ridge * np.eye(len(gram)), rhs)
        self.coef_ = coef
        return self

    def fit_batch(self, batch: RolloutBatch):
        return self.fit(batch.states, batch.timesteps, batch.returns_to_go)

    def predict(self, states, timesteps):
        if self.coef_ is None:
            return np.zeros(len(np.atleast_2d(states)))
        return self.features(states, timesteps) @ self.coef_


def compute_advantages(batch: RolloutBatch, baseline: LinearBaseline, normalize=True):
    adv = batch.returns_to_go - baseline.predict(batch.states, batch.timesteps)
    if normalize and len(adv) > 1:
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
    return adv


def surrogate(policy: PolicyNet, states, actions, advantages, old_log_probs):
    """Importance-weighted advantage ``mean(pi / pi_old * A)``."""
    ratio = np.exp(policy.log_prob(states, actions) - old_log_probs)
    return float(np.mean(ratio * advantages))


def surrogate_grad(policy: PolicyNet, states, actions, advantages, old_log_probs):
    """Analytic gradient of :func:`surrogate` w.r.t. the flat parameters."""
    x = policy.normalize(states)
    mean = policy.forward(x, cache=True)
    diff = np.atleast_2d(actions) - mean
    log_p = (-0.5 * np.sum(diff ** 2, axis=1) / policy.sigma ** 2
             - mean.shape[1] * np.log(policy.sigma) - 0.5 * mean.shape[1] * np.log(2 * np.pi))
    ratio = np.exp(log_p - old_log_probs)
    weight = (ratio * advantages / len(advantages))[:, None]
    return policy.backward(weight * diff / policy.sigma ** 2)


def mean_kl(policy: PolicyNet, old_mean, x):
    """Mean KL(old || new) between fixed-variance Gaussians at inputs ``x``."""
    diff = policy.forward(x) - old_mean
    return float(np.mean(np.sum(diff ** 2, axis=1)) / (2.0 * policy.sigma ** 2))


def conjugate_gradient(matvec, b, iterations=10, tol=1e-10):
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rr = r @ r
    for _ in range(iterations):
        if rr < tol:
            break
        ap = matvec(p)
        alpha = rr / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class UpdateStats:
    accepted: bool = False
    kl: float = 0.0
    improvement: float = 0.0
    grad_norm: float = 0.0
    backtracks: int = 0
    nonfinite: bool = False


def pg_update(policy: PolicyNet, batch: RolloutBatch, advantages, kl_limit=0.01,
              cg_iters=10, backtrack_coef=0.8, max_backtracks=10, damping=1e-2):
    """One trust-region step on the surrogate objective.

    The step direction solves ``F x = g`` by conjugate gradient with
    Fisher-vector products ``J^T J v / (N sigma^2)``; the step is scaled to
    the KL limit and shrunk geometrically until the sampled mean KL is
    within ``kl_limit`` and the surrogate improves.  Parameters are left
    unchanged when no step is accepted.
    """
    stats = UpdateStats()
    advantages = np.asarray(advantages, dtype=float)
    if len(advantages) == 0:
        raise ValueError("empty batch")
    old_params = policy.params.copy()
    x = policy.normalize(batch.states)
    old_mean = policy.forward(x)
    old_logp = batch.log_probs
    grad = surrogate_grad(policy, batch.states, batch.actions, advantages, old_logp)
    if not np.all(np.isfinite(grad)):
        stats.nonfinite = True
        return stats
    stats.grad_norm = float(np.linalg.norm(grad))
    if stats.grad_norm == 0.0:
        return stats
    n = len(x)

    def fisher_vec(v):
        policy.forward(x, cache=True)
        jv = policy.jvp(x, v)
        return policy.backward(jv / (n * policy.sigma ** 2)) + damping * v

    direction = conjugate_gradient(fisher_vec, grad, cg_iters)
    shs = float(direction @ fisher_vec(direction))
    if not np.isfinite(shs) or shs <= 0.0:
        stats.nonfinite = not np.isfinite(shs)
        return stats
    full_step = np.sqrt(2.0 * kl_limit / shs) * direction
    base = surrogate(policy, batch.states, batch.actions, advantages, old_logp)
    for k in range(max_backtracks):
        policy.set_params(old_params + backtrack_coef ** k * full_step)
        kl = mean_kl(policy, old_mean, x)
        improvement = surrogate(policy, batch.states, batch.actions, advantages, old_logp) - base
        if np.isfinite(kl) and kl <= kl_limit and improvement > 0.0:
            stats.accepted = True
            stats.kl = kl
            stats.improvement = improvement
            stats.backtracks = k
            return stats
    policy.set_params(old_params)
    stats.backtracks = max_backtracks
    return stats


@dataclass
class CurvePoint:
    iteration: int
    cumulative_timesteps: int
    mean_return: float
    kl: float
    success_rate: float
    accepted: bool = True
    extra: dict = field(default_factory=dict)


def refine(policy: PolicyNet, env, iterations: int, batch_timesteps=None, rng=None,
           timestep_offset: int = 0, kl_limit=0.01):
    """Alternate rollout collection and trust-region updates.

    ``cumulative_timesteps`` counts every environment step taken so far,
    starting from ``timestep_offset`` (the exploration and demonstration
    cost when the policy was initialised from demonstrations).
    """
    if batch_timesteps is None:
        batch_timesteps = 10 * env.horizon
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    baseline = LinearBaseline(policy, env.horizon)
    curve = []
    timesteps = timestep_offset
    for it in range(iterations):
        start = env.n_steps
        batch = collect_rollouts(env, policy, batch_timesteps, rng)
        timesteps += env.n_steps - start
        baseline.fit_batch(batch)
        adv = compute_advantages(batch, baseline)
        stats = pg_update(policy, batch, adv, kl_limit=kl_limit)
        curve.append(CurvePoint(it, timesteps, float(batch.episode_returns.mean()), stats.kl,
                                batch.success_rate, stats.accepted))
    return curve


CURVE_FIELDS = ("seed", "iteration", "cumulative_timesteps", "mean_return", "kl", "success_rate")


def write_curve(path, curve, seed, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(CURVE_FIELDS)
        for p in curve:
            writer.writerow([seed, p.iteration, p.cumulative_timesteps, repr(p.mean_return),
                             repr(p.kl), repr(p.success_rate)])
