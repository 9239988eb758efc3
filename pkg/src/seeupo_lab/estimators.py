"""Thin scikit-learn style wrappers for parameter sweeps.

``fit`` takes an environment spec rather than a feature matrix; the
wrappers exist so ``get_params``/``set_params``/``clone`` work in sweep
code. Nothing here is usable inside a sklearn ``Pipeline``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .advantage import exact_return
from .envs import TreeBanditSpec
from .policy import TabularSoftmaxPolicy
from .seeupo import run_seeupo
from .updates import UpdateConfig, run_algorithm


class _PolicyEstimator(BaseEstimator):
    def _config(self) -> UpdateConfig:
        return UpdateConfig(learning_rate=self.learning_rate, clip_epsilon=self.clip_epsilon,
                            epochs_per_batch=self.epochs_per_batch, normalization=self.normalization,
                            per_key_scaling=self.per_key_scaling)

    def _initial_policy(self, env) -> TabularSoftmaxPolicy:
        if isinstance(env, TreeBanditSpec):
            return TabularSoftmaxPolicy.for_tree_bandit(env)
        return TabularSoftmaxPolicy.for_mdp(env)

    def predict_proba(self, keys) -> np.ndarray:
        check_is_fitted(self, "policy_")
        return np.array([self.policy_.action_probs(k) for k in keys])

    def predict(self, keys) -> np.ndarray:
        return np.array([int(np.argmax(p)) for p in self.predict_proba(keys)])

    def score(self, env, y=None) -> float:
        """Exact expected return of the fitted policy on ``env``."""
        check_is_fitted(self, "policy_")
        return exact_return(env, self.policy_)


class SeeUPOEstimator(_PolicyEstimator):
    def __init__(self, learning_rate=20.0, clip_epsilon=0.2, epochs_per_batch=1, normalization="none",
                 per_key_scaling=True, iterations=100, order="reverse", mode="exact", B=8, G=8, seed=0):
        self.learning_rate = learning_rate
        self.clip_epsilon = clip_epsilon
        self.epochs_per_batch = epochs_per_batch
        self.normalization = normalization
        self.per_key_scaling = per_key_scaling
        self.iterations = iterations
        self.order = order
        self.mode = mode
        self.B = B
        self.G = G
        self.seed = seed

    def fit(self, env, y=None):
        if not isinstance(env, TreeBanditSpec):
            raise TypeError("SeeUPOEstimator fits tree bandits")
        policy = self._initial_policy(env)
        self.report_ = run_seeupo(env, policy, self._config(), self.iterations, self.order, self.mode,
                                  self.seed, self.B, self.G)
        self.policy_ = policy
        return self


class BaselineEstimator(_PolicyEstimator):
    def __init__(self, algorithm="GRAE-PPU-seq", learning_rate=0.1, clip_epsilon=0.2, epochs_per_batch=1,
                 normalization="none", per_key_scaling=False, iterations=100, mode="exact", B=8, G=8, seed=0):
        self.algorithm = algorithm
        self.learning_rate = learning_rate
        self.clip_epsilon = clip_epsilon
        self.epochs_per_batch = epochs_per_batch
        self.normalization = normalization
        self.per_key_scaling = per_key_scaling
        self.iterations = iterations
        self.mode = mode
        self.B = B
        self.G = G
        self.seed = seed

    def fit(self, env, y=None):
        policy = self._initial_policy(env)
        self.report_ = run_algorithm(self.algorithm, env, policy, self._config(), self.iterations, self.seed,
                                     self.mode, self.B, self.G)
        self.policy_ = policy
        return self
