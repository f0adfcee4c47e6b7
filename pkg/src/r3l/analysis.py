"""Random-walk and sampling-complexity analysis.

Covers the hitting probability of a random walk in parameter space, a
simulator for noisy gradient descent viewed as a stochastic process, the
expected-sampling-complexity bound implied by an exponential failure tail,
and log-linear fits of empirical failure fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "InsufficientDataError",
    "RandomWalkConfig",
    "TailFit",
    "failure_counts",
    "fit_failure_tail",
    "hitting_probability",
    "monte_carlo_hitting_probability",
    "sampling_complexity_bound",
    "simulate_sgd_process",
]


class InsufficientDataError(ValueError):
    """Fewer than two budgets with a nonzero failure fraction."""


def hitting_probability(r: float, R: float, d: int) -> float:
    """Probability that a random walk started at distance ``R`` ever enters the ball of radius ``r``.

    Equal to ``(r / R) ** (d - 2)``; only defined for ``d >= 3`` and
    ``0 < r < R``.
    """
    if d < 3:
        raise ValueError(f"dimension must be at least 3, got {d}")
    if not 0.0 < r < R:
        raise ValueError(f"need 0 < r < R, got r={r}, R={R}")
    return (r / R) ** (d - 2)


@dataclass
class RandomWalkConfig:
    """Noisy gradient descent ``theta <- theta - lr * g(theta) + (lr / n_mb) * B @ dW``.

    ``noise_factor`` is ``B`` with ``C = B B^T`` the constant gradient-noise
    covariance; ``drift`` is ``g`` (``None`` for a flat loss surface) and is
    called on an ``(n_runs, d)`` array of iterates.  Runs
    stop when ``|theta - center| < radius``, after ``max_steps``, or when the
    walk moves beyond ``escape_radius`` of the center.
    """

    theta0: np.ndarray
    center: np.ndarray
    radius: float
    learning_rate: float = 1.0
    batch_size: float = 1.0
    noise_factor: Optional[np.ndarray] = None
    drift: Optional[Callable[[np.ndarray], np.ndarray]] = None
    max_steps: int = 1_000_000
    escape_radius: float = math.inf

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float).reshape(-1)
        self.center = np.asarray(self.center, dtype=float).reshape(-1)
        d = self.dimension
        if self.center.shape != (d,):
            raise ValueError("theta0 and center must have the same dimension")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not self.start_distance > self.radius:
            raise ValueError("start must lie outside the target ball (R > r)")
        if self.noise_factor is None:
            self.noise_factor = np.zeros((d, d))
        self.noise_factor = np.asarray(self.noise_factor, dtype=float)
        if self.noise_factor.shape != (d, d):
            raise ValueError(f"noise_factor must be {d}x{d}")

    @property
    def dimension(self) -> int:
        return len(self.theta0)

    @property
    def start_distance(self) -> float:
        return float(np.linalg.norm(self.center - self.theta0))

    @property
    def covariance(self) -> np.ndarray:
        return self.noise_factor @ self.noise_factor.T


def simulate_sgd_process(config: RandomWalkConfig, rng, n_runs: Optional[int] = None):
    """Iterate the noisy update until the target ball is hit.

    Returns ``(hit, steps)`` for a single run, or boolean/integer arrays of
    length ``n_runs`` when ``n_runs`` is given (runs are simulated together).
    """
    single = n_runs is None
    n = 1 if single else int(n_runs)
    hit = np.zeros(n, dtype=bool)
    steps = np.full(n, config.max_steps, dtype=np.int64)
    idx = np.arange(n)
    th = np.tile(config.theta0 - config.center, (n, 1))
    noise_scale = config.learning_rate / config.batch_size
    b_t = noise_scale * config.noise_factor.T
    has_noise = bool(np.any(config.noise_factor))
    r2 = config.radius ** 2
    esc2 = config.escape_radius ** 2
    for step in range(1, config.max_steps + 1):
        if config.drift is not None:
            th = th - config.learning_rate * np.asarray(config.drift(th + config.center))
        if has_noise:
            th = th + rng.standard_normal(th.shape) @ b_t
        dist2 = np.einsum("ij,ij->i", th, th)
        inside = dist2 < r2
        finished = inside | (dist2 > esc2)
        if finished.any():
            hit[idx[inside]] = True
            steps[idx[finished]] = step
            keep = ~finished
            idx, th = idx[keep], th[keep]
            if len(idx) == 0:
                break
    if single:
        return bool(hit[0]), int(steps[0])
    return hit, steps


def monte_carlo_hitting_probability(r, R, d, n_walks, rng, step_fraction=1.0 / 20.0,
                                    max_steps=1_000_000, escape_factor=1000.0):
    """Fraction of zero-drift isotropic Gaussian walks that enter the ball.

    The per-coordinate step standard deviation is ``step_fraction * r`` next
    to the ball and grows with the gap ``|theta| - r`` far away from it, so
    the step stays small relative to the distance left to the target.
    Walks beyond ``escape_factor * R`` or past ``max_steps`` count as misses;
    both truncations bias the estimate slightly downward.
    """
    pos = np.zeros((n_walks, d))
    pos[:, 0] = R
    active = np.arange(n_walks)
    hits = 0
    escape = escape_factor * R
    for _ in range(max_steps):
        p = pos[active]
        dist = np.linalg.norm(p, axis=1)
        std = step_fraction * np.maximum(r, dist - r)
        p = p + std[:, None] * rng.standard_normal(p.shape)
        pos[active] = p
        dist = np.linalg.norm(p, axis=1)
        inside = dist < r
        hits += int(inside.sum())
        active = active[~(inside | (dist > escape))]
        if len(active) == 0:
            break
    return hits / n_walks


def sampling_complexity_bound(a: float, b: float) -> float:
    """Expected-iteration bound ``a / (4 sinh^2(b / 2))`` for failure tails ``a e^{-bk}``.

    Evaluated as ``a e^{-b} / (1 - e^{-b})^2``, the same quantity in a form
    that stays exact for ``b = ln 2``.
    """
    if b <= 0:
        raise ValueError(f"b must be positive, got {b}")
    if a < 0:
        raise ValueError(f"a must be non-negative, got {a}")
    return a * math.exp(-b) / math.expm1(-b) ** 2


@dataclass
class TailFit:
    budgets: np.ndarray
    failure_fractions: np.ndarray
    a: float
    b: float

    def predict(self, k):
        return self.a * np.exp(-self.b * np.asarray(k, dtype=float))

    def expected_iterations_bound(self) -> float:
        return sampling_complexity_bound(self.a, self.b)

    def to_dict(self):
        return {
            "budgets": self.budgets.tolist(),
            "failure_fractions": self.failure_fractions.tolist(),
            "a": self.a,
            "b": self.b,
        }


def failure_counts(first_success, budgets):
    """Per-budget ``(failures, runs)`` from each run's first-success timestep.

    ``first_success`` holds the timestep at which a run first reached the
    goal, or ``None``/``inf`` for runs that never did.
    """
    hit_at = np.array([np.inf if t is None else t for t in first_success], dtype=float)
    return {int(k): (int(np.sum(hit_at > k)), len(hit_at)) for k in budgets}


def fit_failure_tail(runs) -> TailFit:
    """Least-squares fit of ``log(failure fraction)`` against the budget.

    ``runs`` maps budget ``k`` to ``(failures, total)``.  Budgets with zero
    failures are excluded from the fit.
    """
    budgets = np.array(sorted(runs), dtype=float)
    fractions = np.array([runs[int(k)][0] / runs[int(k)][1] for k in budgets])
    if np.any((fractions < 0) | (fractions > 1)):
        raise ValueError("failure fractions must lie in [0, 1]")
    usable = fractions > 0
    if usable.sum() < 2:
        raise InsufficientDataError("need at least two budgets with nonzero failures")
    slope, intercept = np.polyfit(budgets[usable], np.log(fractions[usable]), 1)
    return TailFit(budgets, fractions, float(np.exp(intercept)), float(-slope))
