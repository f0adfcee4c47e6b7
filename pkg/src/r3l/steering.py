"""Local steering policies for tree expansion.

The learned steering model regresses actions on ``(state, displacement)``
pairs with Bayesian linear regression over random Fourier features that
approximate a squared-exponential kernel.  Both building blocks follow the
scikit-learn estimator API so they can be used and validated on their own.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "BayesianLinearRegression",
    "LearnedSteering",
    "RandomFourierFeatures",
    "RandomSteering",
    "make_steering",
]


def _as_generator(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


class RandomFourierFeatures(TransformerMixin, BaseEstimator):
    """Random Fourier feature map for the squared-exponential kernel.

    ``phi(x) = sqrt(2 / m) * cos(x @ W + b)`` with ``W ~ N(0, 1 / lengthscale**2)``
    and ``b ~ U[0, 2 pi)``, so that ``phi(x) @ phi(y)`` approximates
    ``exp(-|x - y|**2 / (2 lengthscale**2))``.

    Parameters
    ----------
    n_components : int, default=300
        Number of features ``m``.
    lengthscale : float, default=0.3
        Kernel lengthscale.
    random_state : int, Generator or None
        Source of the frozen frequencies and phases.

    Attributes
    ----------
    random_weights_ : ndarray of shape (n_features_in_, n_components)
    random_offset_ : ndarray of shape (n_components,)
    """

    def __init__(self, n_components=300, lengthscale=0.3, random_state=None):
        self.n_components = n_components
        self.lengthscale = lengthscale
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")
        rng = _as_generator(self.random_state)
        self.n_features_in_ = X.shape[1]
        self.random_weights_ = rng.normal(
            scale=1.0 / self.lengthscale, size=(self.n_features_in_, self.n_components)
        )
        self.random_offset_ = rng.uniform(0.0, 2.0 * np.pi, size=self.n_components)
        self._scale = np.sqrt(2.0 / self.n_components)
        return self

    def transform(self, X):
        check_is_fitted(self, "random_weights_")
        X = check_array(X)
        return self.features(X)

    def features(self, X):
        """Unvalidated feature map; accepts a single vector or a 2-D batch."""
        return self._scale * np.cos(X @ self.random_weights_ + self.random_offset_)


class BayesianLinearRegression(RegressorMixin, BaseEstimator):
    """Conjugate Bayesian linear regression with known noise precision.

    The prior on each output's weights is ``N(0, alpha^-1 I)`` and the noise
    precision is ``beta``.  All outputs share one precision matrix
    ``alpha I + beta Phi^T Phi``; each output keeps its own vector
    ``b = beta Phi^T y``.  :meth:`partial_fit` applies one rank-1 update per
    observation and keeps the covariance current with the Sherman-Morrison
    identity; :meth:`reference_mean` recomputes the mean with a fresh
    Cholesky solve.

    Parameters
    ----------
    alpha : float, default=0.1
        Prior precision.
    beta : float, default=1.0
        Noise precision.
    refresh_every : int, default=1000
        Number of rank-1 updates between exact covariance refreshes.
    """

    def __init__(self, alpha=0.1, beta=1.0, refresh_every=1000):
        self.alpha = alpha
        self.beta = beta
        self.refresh_every = refresh_every

    def _init_posterior(self, n_features, n_outputs):
        self.n_features_in_ = n_features
        self.n_outputs_ = n_outputs
        self.precision_ = self.alpha * np.eye(n_features)
        self.covariance_ = np.eye(n_features) / self.alpha
        self.b_ = np.zeros((n_features, n_outputs))
        self.n_updates_ = 0

    def init(self, n_features, n_outputs=1):
        """Reset to the prior without seeing data."""
        self._init_posterior(n_features, n_outputs)
        return self

    def fit(self, X, y):
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        y2 = y.reshape(len(X), -1)
        self._init_posterior(X.shape[1], y2.shape[1])
        self.precision_ += self.beta * X.T @ X
        self.b_ += self.beta * X.T @ y2
        self.n_updates_ = len(X)
        self._refresh()
        self._y_1d = y.ndim == 1
        return self

    def partial_fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y2 = np.asarray(y, dtype=float).reshape(len(X), -1)
        if not hasattr(self, "precision_"):
            self._init_posterior(X.shape[1], y2.shape[1])
            self._y_1d = np.ndim(y) == 1
        for phi, target in zip(X, y2):
            self.update(phi, target)
        return self

    def update(self, phi, target):
        """Rank-1 update with one feature vector and its target(s)."""
        phi = np.asarray(phi, dtype=float)
        self.precision_ += self.beta * np.outer(phi, phi)
        self.b_ += self.beta * np.outer(phi, np.atleast_1d(target))
        s_phi = self.covariance_ @ phi
        denom = 1.0 + self.beta * phi @ s_phi
        self.covariance_ -= (self.beta / denom) * np.outer(s_phi, s_phi)
        self.n_updates_ += 1
        if self.refresh_every and self.n_updates_ % self.refresh_every == 0:
            self._refresh()

    def _refresh(self):
        factor = cho_factor(self.precision_, lower=True)
        self.covariance_ = cho_solve(factor, np.eye(self.n_features_in_))
        self.covariance_ = 0.5 * (self.covariance_ + self.covariance_.T)

    @property
    def coef_(self):
        """Posterior mean weights, shape (n_features, n_outputs)."""
        return self.covariance_ @ self.b_

    def reference_mean(self):
        """Posterior mean from a fresh Cholesky solve of the precision matrix."""
        return cho_solve(cho_factor(self.precision_, lower=True), self.b_)

    def predictive(self, phi):
        """Predictive mean (n_outputs,) and variance for one feature vector."""
        s_phi = self.covariance_ @ phi
        mean = self.b_.T @ s_phi
        var = 1.0 / self.beta + phi @ s_phi
        return mean, var

    def predict(self, X, return_std=False):
        check_is_fitted(self, "precision_")
        X = check_array(X)
        mean = X @ self.coef_
        if getattr(self, "_y_1d", False):
            mean = mean[:, 0]
        if not return_std:
            return mean
        var = 1.0 / self.beta + np.einsum("ij,jk,ik->i", X, self.covariance_, X)
        return mean, np.sqrt(var)

    def sample(self, X, random_state=None):
        """Draw one value per row from the posterior predictive."""
        mean, std = self.predict(X, return_std=True)
        rng = _as_generator(random_state)
        if mean.ndim == 1:
            return mean + std * rng.standard_normal(mean.shape)
        return mean + std[:, None] * rng.standard_normal(mean.shape)


class LearnedSteering:
    """Local policy mapping (state, desired displacement) to an action.

    Inputs are normalized states and normalized displacements concatenated
    into one vector.  Sampled actions come from the posterior predictive of
    one regression head per action dimension and are clipped to the bounds.
    """

    mode = "learned"

    def __init__(self, env, rng, n_features=300, lengthscale=0.3, alpha=0.1, beta=1.0):
        self.env = env
        self.features = RandomFourierFeatures(n_features, lengthscale, random_state=rng)
        self.features.fit(np.zeros((1, 2 * env.state_dim)))
        self.regression = BayesianLinearRegression(alpha=alpha, beta=beta).init(
            n_features, env.action_dim
        )

    def _phi(self, state, target):
        s = self.env.normalize(state)
        return self.features.features(np.concatenate([s, self.env.normalize(target) - s]))

    def sample(self, state, target, rng):
        mean, var = self.regression.predictive(self._phi(state, target))
        action = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        return np.clip(action, self.env.action_low, self.env.action_high)

    def update(self, state, next_state, action):
        self.regression.update(self._phi(state, next_state), action)

    def to_dict(self):
        reg = self.regression
        return {
            "alpha": reg.alpha,
            "beta": reg.beta,
            "lengthscale": self.features.lengthscale,
            "m": self.features.n_components,
            "frequencies": self.features.random_weights_.T.tolist(),
            "phases": self.features.random_offset_.tolist(),
            "precision": [reg.precision_.tolist() for _ in range(reg.n_outputs_)],
            "b": reg.b_.T.tolist(),
        }


class RandomSteering:
    """Uniform sampling over the action box; ignores the target."""

    mode = "random"

    def __init__(self, env, rng=None):
        self.env = env

    def sample(self, state, target, rng):
        return rng.uniform(self.env.action_low, self.env.action_high)

    def update(self, state, next_state, action):
        pass


def make_steering(mode, env, rng, **kwargs):
    if mode == "learned":
        return LearnedSteering(env, rng, **kwargs)
    if mode == "random":
        return RandomSteering(env, rng)
    raise ValueError(f"unknown steering mode {mode!r}")
