"""Gaussian MLP policy and behaviour cloning from demonstrations."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .planner import DemoSet

__all__ = [
    "BCRegressor",
    "BCTrainingError",
    "PolicyNet",
    "build_dataset",
    "policy_forward",
    "policy_sample",
    "train_bc",
]


class BCTrainingError(RuntimeError):
    """Training produced a non-finite loss."""


class PolicyNet:
    """Tanh MLP mean with fixed isotropic Gaussian action noise.

    The network consumes states normalized to [-1, 1] by the stored state
    bounds.  All weights and biases live in one flat parameter vector
    ``params``; the per-layer arrays are views into it.

    Parameters
    ----------
    state_low, state_high : array-like
        State bounds used for input normalization.
    action_low, action_high : array-like
        Action bounds used for clipping.
    hidden_sizes : tuple of int, default=(32, 32)
    sigma : float, default=0.3
        Standard deviation of the Gaussian action noise.
    rng : Generator, int or None
        Initialization randomness (Glorot-uniform weights, zero biases).
    """

    activation = "tanh"

    def __init__(self, state_low, state_high, action_low, action_high,
                 hidden_sizes=(32, 32), sigma=0.3, rng=None):
        self.state_low = np.asarray(state_low, dtype=float)
        self.state_high = np.asarray(state_high, dtype=float)
        self.action_low = np.asarray(action_low, dtype=float)
        self.action_high = np.asarray(action_high, dtype=float)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.sigma = float(sigma)
        self.sizes = (len(self.state_low), *self.hidden_sizes, len(self.action_low))
        self._shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self._shapes += [(fan_in, fan_out), (fan_out,)]
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)
        self.params = np.zeros(self.n_params)
        self._bind()
        if rng is not None:
            self.init_glorot(rng)

    @classmethod
    def for_env(cls, env, **kwargs):
        return cls(env.state_low, env.state_high, env.action_low, env.action_high, **kwargs)

    def _bind(self):
        self.layers = []
        offset = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            self.layers.append(self.params[offset:offset + size].reshape(shape))
            offset += size

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("layers", None)
        state.pop("_acts", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._bind()

    def init_glorot(self, rng):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        for i in range(0, len(self.layers), 2):
            w = self.layers[i]
            limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
            self.layers[i + 1][...] = 0.0

    def set_params(self, flat):
        self.params[...] = flat

    def copy(self):
        other = PolicyNet(self.state_low, self.state_high, self.action_low, self.action_high,
                          self.hidden_sizes, self.sigma)
        other.set_params(self.params)
        return other

    # -- forward / backward ---------------------------------------------

    def normalize(self, states):
        states = np.asarray(states, dtype=float)
        return 2.0 * (states - self.state_low) / (self.state_high - self.state_low) - 1.0

    def forward(self, x, cache=False, exact=False):
        """Mean action (pre-clip) for normalized inputs ``x`` of shape (N, d_S).

        With ``exact=True`` every row is computed independently of the batch
        it sits in, so batched and single-state calls agree bit for bit.
        """
        h = np.atleast_2d(x)
        acts = [h]
        n_layers = len(self.layers) // 2
        for i in range(n_layers):
            if exact:
                z = np.einsum("ij,jk->ik", h, self.layers[2 * i]) + self.layers[2 * i + 1]
            else:
                z = h @ self.layers[2 * i] + self.layers[2 * i + 1]
            h = np.tanh(z) if i < n_layers - 1 else z
            acts.append(h)
        if cache:
            self._acts = acts
        return h

    def backward(self, grad_out):
        """Gradient of ``sum(grad_out * forward(x))`` w.r.t. the flat parameters.

        Uses the activations cached by the last ``forward(x, cache=True)``.
        """
        acts = self._acts
        grad = np.empty(self.n_params)
        views = []
        offset = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            views.append(grad[offset:offset + size].reshape(shape))
            offset += size
        delta = np.atleast_2d(grad_out)
        n_layers = len(self.layers) // 2
        for i in reversed(range(n_layers)):
            views[2 * i][...] = acts[i].T @ delta
            views[2 * i + 1][...] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.layers[2 * i].T) * (1.0 - acts[i] ** 2)
        return grad

    def jvp(self, x, v):
        """Directional derivative of the mean output along parameter direction ``v``."""
        vl = []
        offset = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            vl.append(v[offset:offset + size].reshape(shape))
            offset += size
        h = np.atleast_2d(x)
        dh = np.zeros_like(h)
        n_layers = len(self.layers) // 2
        for i in range(n_layers):
            z = h @ self.layers[2 * i] + self.layers[2 * i + 1]
            dz = dh @ self.layers[2 * i] + h @ vl[2 * i] + vl[2 * i + 1]
            if i < n_layers - 1:
                h = np.tanh(z)
                dh = (1.0 - h ** 2) * dz
            else:
                h, dh = z, dz
        return dh

    # -- acting ---------------------------------------------------------

    def mean_action(self, states, exact=False):
        return self.forward(self.normalize(states), exact=exact)

    def act(self, state):
        """Deterministic, clipped action for one raw state."""
        mean = self.forward(self.normalize(state), exact=True)[0]
        return np.clip(mean, self.action_low, self.action_high)

    def log_prob(self, states, actions):
        mean = self.mean_action(states)
        diff = np.atleast_2d(actions) - mean
        d = mean.shape[1]
        return (-0.5 * np.sum(diff ** 2, axis=1) / self.sigma ** 2
                - d * np.log(self.sigma) - 0.5 * d * np.log(2 * np.pi))

    # -- persistence ----------------------------------------------------

    def to_dict(self):
        return {
            "layer_sizes": list(self.sizes),
            "activation": self.activation,
            "sigma": self.sigma,
            "state_low": self.state_low.tolist(),
            "state_high": self.state_high.tolist(),
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "weights": [w.ravel().tolist() for w in self.layers],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("activation", "tanh") != "tanh":
            raise ValueError(f"unsupported activation {data['activation']!r}")
        net = cls(data["state_low"], data["state_high"], data["action_low"],
                  data["action_high"], tuple(data["layer_sizes"][1:-1]), data["sigma"])
        net.set_params(np.concatenate([np.asarray(w, dtype=float) for w in data["weights"]]))
        return net

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def policy_forward(policy: PolicyNet, state) -> np.ndarray:
    return policy.act(state)


def policy_sample(policy: PolicyNet, state, rng) -> np.ndarray:
    mean = policy.forward(policy.normalize(state), exact=True)[0]
    noisy = mean + policy.sigma * rng.standard_normal(mean.shape)
    return np.clip(noisy, policy.action_low, policy.action_high)


def build_dataset(demos: DemoSet, env=None):
    """Stack ``(normalized s_t, a_t)`` pairs over every demonstration transition."""
    if demos is None or len(demos) == 0:
        raise ValueError("empty demonstration set")
    states = np.concatenate([t.states[:-1] for t in demos.trajectories if len(t)])
    actions = np.concatenate([t.actions for t in demos.trajectories if len(t)])
    if env is not None:
        states = env.normalize(states)
    return states, actions


def mse_loss_and_grad(policy: PolicyNet, x, y):
    """Mean squared error over samples and action dimensions, and its gradient."""
    pred = policy.forward(x, cache=True)
    diff = pred - y
    loss = float(np.mean(diff ** 2))
    grad = policy.backward(2.0 * diff / diff.size)
    return loss, grad


def train_bc(policy: PolicyNet, dataset, epochs=500, batch_size=64, learning_rate=1e-3,
             rng=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fit the policy mean to demonstration actions with Adam.

    Returns the per-epoch training loss, evaluated on the full dataset after
    each epoch (entry 0 is the loss before training).
    """
    x, y = dataset
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty dataset")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    m = np.zeros(policy.n_params)
    v = np.zeros(policy.n_params)
    t = 0
    curve = [mse_loss_and_grad(policy, x, y)[0]]
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            _, grad = mse_loss_and_grad(policy, x[idx], y[idx])
            t += 1
            m = beta1 * m + (1 - beta1) * grad
            v = beta2 * v + (1 - beta2) * grad ** 2
            m_hat = m / (1 - beta1 ** t)
            v_hat = v / (1 - beta2 ** t)
            policy.params -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)
        loss = float(np.mean((policy.forward(x) - y) ** 2))
        if not np.isfinite(loss):
            raise BCTrainingError(
                f"loss became {loss} at epoch {epoch}; last finite loss {curve[-1]:.4g}, "
                f"max |param| {np.max(np.abs(np.nan_to_num(policy.params))):.3g}"
            )
        curve.append(loss)
    return np.asarray(curve)


class BCRegressor(RegressorMixin, BaseEstimator):
    """Behaviour cloning as a scikit-learn regressor on normalized states.

    ``fit(X, y)`` trains a fresh :class:`PolicyNet` whose inputs are already
    normalized, so the network's own normalization is the identity.

    Attributes
    ----------
    policy_ : PolicyNet
    loss_curve_ : ndarray
    """

    def __init__(self, hidden_sizes=(32, 32), epochs=500, batch_size=64,
                 learning_rate=1e-3, sigma=0.3, action_low=None, action_high=None,
                 random_state=None):
        self.hidden_sizes = hidden_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sigma = sigma
        self.action_low = action_low
        self.action_high = action_high
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True)
        y2 = y.reshape(len(y), -1)
        d_a = y2.shape[1]
        low = np.full(d_a, -np.inf) if self.action_low is None else self.action_low
        high = np.full(d_a, np.inf) if self.action_high is None else self.action_high
        rng = np.random.default_rng(self.random_state)
        d_s = X.shape[1]
        self.policy_ = PolicyNet(-np.ones(d_s), np.ones(d_s), low, high,
                                 self.hidden_sizes, self.sigma, rng=rng)
        self.loss_curve_ = train_bc(self.policy_, (X, y2), self.epochs, self.batch_size,
                                    self.learning_rate, rng=rng)
        self.n_features_in_ = d_s
        self._y_1d = y.ndim == 1
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        X = check_array(X)
        out = np.clip(self.policy_.forward(X), self.policy_.action_low, self.policy_.action_high)
        return out[:, 0] if self._y_1d else out


def clone_policy(env, demos: DemoSet, rng=None, epochs=500, batch_size=64,
                 learning_rate=1e-3, sigma=0.3):
    """Build and train a policy for ``env`` from demonstrations."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    policy = PolicyNet.for_env(env, sigma=sigma, rng=rng)
    dataset = build_dataset(demos, env)
    curve = train_bc(policy, dataset, epochs, batch_size, learning_rate, rng=rng)
    return policy, curve
