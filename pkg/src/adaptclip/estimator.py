"""scikit-learn style wrapper: ``fit`` trains a policy on an environment,
``predict`` maps observations to greedy actions.

Training data comes from the environment rather than from ``X``, so ``fit``
ignores its arguments; they exist so the estimator composes with tooling
that expects the usual signature (``clone``, ``get_params``, grid search).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .envs import make_env
from .policy import Categorical, forward_policy, forward_value
from .trainer import TrainConfig, Trainer


class AdaptiveClipPPO(BaseEstimator):
    """PPO with an adaptive clipping threshold, as an estimator.

    Parameters mirror :class:`~adaptclip.trainer.TrainConfig`; the clipping
    fields (``variant``, ``epsilon_0``, ``lambda_1``, ``lambda_2``) are
    forwarded to the clipping config. After ``fit``: ``params_`` (network
    weights), ``record_`` (the run record), ``n_features_in_`` and, for
    discrete action spaces, ``classes_``.
    """

    def __init__(self, env="cartpole", variant="ppo_br", total_iterations=10, rollout_steps=2048,
                 epochs_per_iter=4, minibatch_size=64, learning_rate=3e-4, epsilon_0=0.2,
                 lambda_1=0.5, lambda_2=0.3, env_params=None, seed=0, n_eval_episodes=10):
        self.env = env
        self.variant = variant
        self.total_iterations = total_iterations
        self.rollout_steps = rollout_steps
        self.epochs_per_iter = epochs_per_iter
        self.minibatch_size = minibatch_size
        self.learning_rate = learning_rate
        self.epsilon_0 = epsilon_0
        self.lambda_1 = lambda_1
        self.lambda_2 = lambda_2
        self.env_params = env_params
        self.seed = seed
        self.n_eval_episodes = n_eval_episodes

    def _config(self) -> TrainConfig:
        return TrainConfig(
            env=self.env, env_params=dict(self.env_params or {}), seed=self.seed,
            total_iterations=self.total_iterations, rollout_steps=self.rollout_steps,
            epochs_per_iter=self.epochs_per_iter, minibatch_size=self.minibatch_size,
            learning_rate=self.learning_rate,
            clip={"variant": self.variant, "epsilon_0": self.epsilon_0,
                  "lambda_1": self.lambda_1, "lambda_2": self.lambda_2},
        )

    def fit(self, X=None, y=None):
        trainer = Trainer(self._config())
        for _ in range(self.total_iterations):
            trainer.train_iteration()
        self.params_ = trainer.params
        self.record_ = trainer.record
        self.spec_ = trainer.spec
        self.n_features_in_ = trainer.spec.observation_dim
        if trainer.spec.discrete:
            self.classes_ = np.arange(trainer.spec.action_space.n)
        return self

    def _validate(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} "
                             f"is expecting {self.n_features_in_} features as input")
        return X

    def predict(self, X) -> np.ndarray:
        """Greedy actions: the most probable class, or the clipped Gaussian mean."""
        X = self._validate(X)
        dist = forward_policy(self.params_, X)
        if isinstance(dist, Categorical):
            return np.argmax(dist.logits, axis=-1)
        space = self.spec_.action_space
        return np.clip(dist.mean, space.low, space.high)

    def predict_proba(self, X) -> np.ndarray:
        X = self._validate(X)
        dist = forward_policy(self.params_, X)
        if not isinstance(dist, Categorical):
            raise AttributeError("predict_proba is only available for discrete action spaces")
        return dist.probs

    def value(self, X) -> np.ndarray:
        """Critic estimate V(s) per row."""
        return np.atleast_1d(forward_value(self.params_, self._validate(X)))

    def score(self, X=None, y=None) -> float:
        """Mean return of the greedy policy over ``n_eval_episodes`` seeded episodes."""
        check_is_fitted(self, "params_")
        env = make_env(self.env, clamp_actions=True, **(self.env_params or {}))
        total = 0.0
        for ep in range(self.n_eval_episodes):
            obs = env.reset(seed=self.seed * 100_003 + ep)
            while True:
                action = self.predict(obs[None])[0]
                res = env.step(int(action) if self.spec_.discrete else action)
                total += res.reward
                obs = res.observation
                if res.terminated or res.truncated:
                    break
        return total / self.n_eval_episodes
