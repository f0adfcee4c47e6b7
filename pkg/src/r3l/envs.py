"""Sparse-reward classic-control environments with settable state.

All environments are deterministic: the next state depends only on the
current state and the (clipped) action, so a transition can be replayed by
calling :meth:`Environment.set_state` followed by :meth:`Environment.step`.
Every call to :meth:`Environment.step` increments ``n_steps``, which is the
interaction counter used for timestep accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Acrobot",
    "CartpoleSwingup",
    "DoubleIntegrator",
    "EnvSpec",
    "Environment",
    "InvalidStateError",
    "MountainCar",
    "Pendulum",
    "Transition",
    "UnsupportedOperationError",
    "make_env",
    "wrap_angle",
    "ENV_IDS",
]

DISCOUNT = 0.99


class InvalidStateError(ValueError):
    """Raised for non-finite or out-of-bounds states and actions."""


class UnsupportedOperationError(RuntimeError):
    """Raised when an operation is not defined for an environment."""


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    state_low: np.ndarray
    state_high: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    discount: float = DISCOUNT
    goal_defined: bool = True


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    done: bool


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi], leaving in-range values untouched."""
    if -math.pi <= theta <= math.pi:
        return theta
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def _clip(value: float, low: float, high: float) -> float:
    return low if value < low else high if value > high else value


class Environment:
    """Base class for deterministic, state-settable control tasks.

    Subclasses define the bounds as class attributes and implement
    ``_dynamics``, ``in_goal`` and ``_sample_initial``.
    """

    env_id: str = ""
    state_low: np.ndarray
    state_high: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    discount: float = DISCOUNT
    goal_defined: bool = True
    # Terminating tasks end the episode on the first goal state and keep the
    # -1 reward; non-terminating tasks pay cos(theta) while inside the goal.
    terminates_at_goal: bool = True

    def __init__(self):
        self.state: np.ndarray | None = None
        self.n_steps = 0

    @property
    def state_dim(self) -> int:
        return len(self.state_low)

    @property
    def action_dim(self) -> int:
        return len(self.action_low)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            state_dim=self.state_dim,
            action_dim=self.action_dim,
            state_low=self.state_low.copy(),
            state_high=self.state_high.copy(),
            action_low=self.action_low.copy(),
            action_high=self.action_high.copy(),
            horizon=self.horizon,
            discount=self.discount,
            goal_defined=self.goal_defined,
        )

    def __repr__(self):
        return f"{type(self).__name__}()"

    # -- state handling -------------------------------------------------

    def _check_state(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        if state.shape != (self.state_dim,):
            raise InvalidStateError(
                f"expected state of shape ({self.state_dim},), got {state.shape}"
            )
        if not np.all(np.isfinite(state)):
            raise InvalidStateError(f"non-finite state {state}")
        if np.any(state < self.state_low) or np.any(state > self.state_high):
            raise InvalidStateError(f"state {state} outside bounds")
        return state

    def _check_action(self, action) -> np.ndarray:
        action = np.asarray(action, dtype=float).reshape(-1)
        if action.shape != (self.action_dim,):
            raise InvalidStateError(
                f"expected action of shape ({self.action_dim},), got {action.shape}"
            )
        if not np.all(np.isfinite(action)):
            raise InvalidStateError(f"non-finite action {action}")
        return np.clip(action, self.action_low, self.action_high)

    def set_state(self, state) -> None:
        self.state = self._check_state(state).copy()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = np.asarray(self._sample_initial(rng), dtype=float)
        return self.state.copy()

    # -- dynamics -------------------------------------------------------

    def _dynamics(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _sample_initial(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def goal_reward(self, state: np.ndarray) -> float:
        """Reward paid for a step ending in the goal of a non-terminating task."""
        return -1.0

    def reward(self, next_state: np.ndarray) -> float:
        if not self.terminates_at_goal and self.goal_defined and self.in_goal(next_state):
            return self.goal_reward(next_state)
        return -1.0

    def step(self, action) -> Transition:
        """Advance the stored state by one action and count the interaction."""
        if self.state is None:
            raise InvalidStateError("step() called before reset() or set_state()")
        state = self._check_state(self.state)
        action = self._check_action(action)
        next_state = np.asarray(self._dynamics(state, action), dtype=float)
        self.n_steps += 1
        done = bool(self.terminates_at_goal and self.goal_defined and self.in_goal(next_state))
        self.state = next_state
        return Transition(state, action, next_state.copy(), self.reward(next_state), done)

    def transition(self, state, action) -> Transition:
        """``set_state(state)`` followed by ``step(action)``."""
        self.set_state(state)
        return self.step(action)

    # -- goal and sampling ----------------------------------------------

    def in_goal(self, state) -> bool:
        raise NotImplementedError

    def sample_state_uniform(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.state_low, self.state_high)

    def sample_goal_state(self, rng: np.random.Generator) -> np.ndarray:
        if not self.goal_defined:
            raise UnsupportedOperationError(f"{self.env_id} has no goal set")
        return self._sample_goal(rng)

    def _sample_goal(self, rng: np.random.Generator) -> np.ndarray:
        # Rejection sampling from the bounds box; subclasses override when
        # the goal set has a direct parametrisation.
        for _ in range(100_000):
            state = self.sample_state_uniform(rng)
            if self.in_goal(state):
                return state
        raise RuntimeError("goal rejection sampler did not converge")

    def normalize(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        return 2.0 * (state - self.state_low) / (self.state_high - self.state_low) - 1.0

    def denormalize(self, state) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        return self.state_low + (state + 1.0) * 0.5 * (self.state_high - self.state_low)


class MountainCar(Environment):
    """Continuous-action mountain car; the goal is reaching ``x >= 0.45``."""

    env_id = "mountaincar"
    state_low = np.array([-1.2, -0.07])
    state_high = np.array([0.6, 0.07])
    action_low = np.array([-1.0])
    action_high = np.array([1.0])
    horizon = 200
    power = 0.0015
    goal_position = 0.45

    def __init__(self, start_low: float = -0.6, start_high: float = -0.4):
        super().__init__()
        self.start_low = start_low
        self.start_high = start_high

    def _dynamics(self, state, action):
        x, v = float(state[0]), float(state[1])
        v = v + self.power * float(action[0]) - 0.0025 * math.cos(3.0 * x)
        v = _clip(v, -0.07, 0.07)
        x = _clip(x + v, -1.2, 0.6)
        if x == -1.2 and v < 0.0:
            v = 0.0
        return np.array([x, v])

    def _sample_initial(self, rng):
        x = self.start_low if self.start_low == self.start_high else rng.uniform(
            self.start_low, self.start_high
        )
        return np.array([x, 0.0])

    def in_goal(self, state) -> bool:
        return bool(state[0] >= self.goal_position)

    def _sample_goal(self, rng):
        return np.array(
            [rng.uniform(self.goal_position, self.state_high[0]),
             rng.uniform(self.state_low[1], self.state_high[1])]
        )


class Pendulum(Environment):
    """Torque-limited pendulum; ``theta = 0`` is upright, goal ``cos(theta) > 0.99``."""

    env_id = "pendulum"
    state_low = np.array([-math.pi, -8.0])
    state_high = np.array([math.pi, 8.0])
    action_low = np.array([-2.0])
    action_high = np.array([2.0])
    horizon = 100
    terminates_at_goal = False
    g, m, l, dt = 10.0, 1.0, 1.0, 0.05
    goal_cos = 0.99

    def _dynamics(self, state, action):
        th, om = float(state[0]), float(state[1])
        u = float(action[0])
        om = om + (3.0 * self.g / (2.0 * self.l) * math.sin(th)
                   + 3.0 / (self.m * self.l ** 2) * u) * self.dt
        om = _clip(om, -8.0, 8.0)
        th = wrap_angle(th + om * self.dt)
        return np.array([th, om])

    def _sample_initial(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def in_goal(self, state) -> bool:
        return bool(math.cos(state[0]) > self.goal_cos)

    def goal_reward(self, state):
        return math.cos(state[0])

    def _sample_goal(self, rng):
        lim = math.acos(self.goal_cos)
        while True:
            th = rng.uniform(-lim, lim)
            if math.cos(th) > self.goal_cos:
                return np.array([th, rng.uniform(-8.0, 8.0)])


class Acrobot(Environment):
    """Two-link underactuated arm with continuous torque on the second joint.

    Angles are measured from the hanging position; the goal is the tip of
    the second link above height 1.9.
    """

    env_id = "acrobot"
    state_low = np.array([-math.pi, -math.pi, -4.0 * math.pi, -9.0 * math.pi])
    state_high = np.array([math.pi, math.pi, 4.0 * math.pi, 9.0 * math.pi])
    action_low = np.array([-1.0])
    action_high = np.array([1.0])
    horizon = 500
    dt = 0.2
    link_length_1 = 1.0
    link_mass_1 = link_mass_2 = 1.0
    link_com_1 = link_com_2 = 0.5
    link_moi = 1.0
    gravity = 9.8
    goal_height = 1.9

    def _derivs(self, s, torque):
        m1, m2 = self.link_mass_1, self.link_mass_2
        l1 = self.link_length_1
        lc1, lc2 = self.link_com_1, self.link_com_2
        i1 = i2 = self.link_moi
        g = self.gravity
        th1, th2, dth1, dth2 = s
        d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(th2)) + i1 + i2
        d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(th2)) + i2
        phi2 = m2 * lc2 * g * math.cos(th1 + th2 - math.pi / 2.0)
        phi1 = (
            -m2 * l1 * lc2 * dth2 ** 2 * math.sin(th2)
            - 2 * m2 * l1 * lc2 * dth2 * dth1 * math.sin(th2)
            + (m1 * lc1 + m2 * l1) * g * math.cos(th1 - math.pi / 2.0)
            + phi2
        )
        ddth2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dth1 ** 2 * math.sin(th2) - phi2) / (
            m2 * lc2 ** 2 + i2 - d2 ** 2 / d1
        )
        ddth1 = -(d2 * ddth2 + phi1) / d1
        return (dth1, dth2, ddth1, ddth2)

    def _dynamics(self, state, action):
        torque = float(action[0])
        s = tuple(float(v) for v in state)
        h = self.dt
        k1 = self._derivs(s, torque)
        k2 = self._derivs(tuple(a + h / 2 * b for a, b in zip(s, k1)), torque)
        k3 = self._derivs(tuple(a + h / 2 * b for a, b in zip(s, k2)), torque)
        k4 = self._derivs(tuple(a + h * b for a, b in zip(s, k3)), torque)
        out = [a + h / 6.0 * (b + 2 * c + 2 * d + e) for a, b, c, d, e in zip(s, k1, k2, k3, k4)]
        return np.array([
            wrap_angle(out[0]),
            wrap_angle(out[1]),
            _clip(out[2], self.state_low[2], self.state_high[2]),
            _clip(out[3], self.state_low[3], self.state_high[3]),
        ])

    def _sample_initial(self, rng):
        return rng.uniform(-0.1, 0.1, size=4)

    @staticmethod
    def tip_height(state) -> float:
        return -math.cos(state[0]) - math.cos(state[0] + state[1])

    def in_goal(self, state) -> bool:
        return bool(self.tip_height(state) > self.goal_height)

    def _sample_goal(self, rng):
        # Both links must point nearly straight up, so sample angles near
        # (pi, 0) and reject; velocities are uniform over their bounds.
        while True:
            th0 = wrap_angle(math.pi + rng.uniform(-0.45, 0.45))
            th1 = rng.uniform(-0.9, 0.9)
            state = np.array([th0, th1, 0.0, 0.0])
            if self.in_goal(state):
                state[2:] = rng.uniform(self.state_low[2:], self.state_high[2:])
                return state


class CartpoleSwingup(Environment):
    """Cart-pole started hanging down; ``theta = 0`` is upright.

    Hitting the end of the rail stops the cart instead of ending the episode.
    """

    env_id = "cartpole_swingup"
    state_low = np.array([-2.4, -math.pi, -5.0, -10.0])
    state_high = np.array([2.4, math.pi, 5.0, 10.0])
    action_low = np.array([-10.0])
    action_high = np.array([10.0])
    horizon = 500
    terminates_at_goal = False
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    half_length = 0.5
    dt = 0.02
    goal_cos = 0.9

    def _dynamics(self, state, action):
        x, th, dx, dth = (float(v) for v in state)
        force = float(action[0])
        total_mass = self.masscart + self.masspole
        pml = self.masspole * self.half_length
        costh, sinth = math.cos(th), math.sin(th)
        temp = (force + pml * dth ** 2 * sinth) / total_mass
        thacc = (self.gravity * sinth - costh * temp) / (
            self.half_length * (4.0 / 3.0 - self.masspole * costh ** 2 / total_mass)
        )
        xacc = temp - pml * thacc * costh / total_mass
        x = x + self.dt * dx
        dx = _clip(dx + self.dt * xacc, self.state_low[2], self.state_high[2])
        th = wrap_angle(th + self.dt * dth)
        dth = _clip(dth + self.dt * thacc, self.state_low[3], self.state_high[3])
        if x <= self.state_low[0] or x >= self.state_high[0]:
            x = _clip(x, self.state_low[0], self.state_high[0])
            dx = 0.0
        return np.array([x, th, dx, dth])

    def _sample_initial(self, rng):
        state = np.array([0.0, math.pi, 0.0, 0.0]) + rng.uniform(-0.01, 0.01, size=4)
        state[1] = wrap_angle(state[1])
        return state

    def in_goal(self, state) -> bool:
        return bool(math.cos(state[1]) > self.goal_cos)

    def goal_reward(self, state):
        return math.cos(state[1])

    def _sample_goal(self, rng):
        lim = math.acos(self.goal_cos)
        while True:
            state = self.sample_state_uniform(rng)
            state[1] = rng.uniform(-lim, lim)
            if self.in_goal(state):
                return state


class DoubleIntegrator(Environment):
    """Integer-lattice double integrator used for exhaustive reachability checks.

    Velocity and position stay on integers when the action is in {-1, 0, 1}.
    """

    env_id = "double_integrator"
    state_low = np.array([-5.0, -2.0])
    state_high = np.array([5.0, 2.0])
    action_low = np.array([-1.0])
    action_high = np.array([1.0])
    goal_defined = False

    def __init__(self, horizon: int = 50):
        super().__init__()
        self.horizon = horizon

    def _dynamics(self, state, action):
        v = _clip(float(state[1]) + float(action[0]), -2.0, 2.0)
        x = _clip(float(state[0]) + v, -5.0, 5.0)
        return np.array([x, v])

    def _sample_initial(self, rng):
        return np.zeros(2)

    def in_goal(self, state) -> bool:
        return False


_REGISTRY = {
    cls.env_id: cls for cls in (MountainCar, Pendulum, Acrobot, CartpoleSwingup, DoubleIntegrator)
}
ENV_IDS = ("mountaincar", "pendulum", "acrobot", "cartpole_swingup")


def make_env(env_id: str, **kwargs) -> Environment:
    """Instantiate an environment from its string id."""
    try:
        cls = _REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choose from {sorted(_REGISTRY)}") from None
    return cls(**kwargs)
