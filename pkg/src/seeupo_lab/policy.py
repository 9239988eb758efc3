"""Tabular softmax policies with exact probabilities and score gradients."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .envs import FiniteMdpSpec, TreeBanditSpec
from .rng import make_rng

POLICY_SCHEMA = "seeupo_lab.policy/1"


class HistoryKey(NamedTuple):
    """Decision context of a tree bandit: initial state, earlier actions, turn (1-based)."""

    s0: int
    prefix: tuple
    turn: int


class StateKey(NamedTuple):
    """Decision context of a finite MDP (stationary policy)."""

    state: int


def _key_to_json(key) -> list:
    if isinstance(key, HistoryKey):
        return ["h", key.s0, list(key.prefix), key.turn]
    return ["s", key.state]


def _key_from_json(item):
    if item[0] == "h":
        return HistoryKey(int(item[1]), tuple(int(a) for a in item[2]), int(item[3]))
    return StateKey(int(item[1]))


def tree_keys(spec: TreeBanditSpec) -> list:
    """Every live decision context, ordered by turn, then s0, then prefix."""
    keys = []
    for t in range(1, spec.horizon + 1):
        for s0 in range(spec.num_initial_states):
            for prefix in itertools.product(*(range(n) for n in spec.actions_per_turn[: t - 1])):
                if spec.is_decision_point(s0, prefix):
                    keys.append(HistoryKey(s0, tuple(prefix), t))
    return keys


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable copy of a policy's parameters, in the policy's key order."""

    keys: tuple
    n_actions: tuple
    flat: tuple
    layout: str = "shared"

    def restore(self) -> "TabularSoftmaxPolicy":
        pol = TabularSoftmaxPolicy(list(self.keys), list(self.n_actions), layout=self.layout)
        pol.set_flat(np.array(self.flat, dtype=float))
        return pol

    def to_dict(self) -> dict:
        return {
            "schema": POLICY_SCHEMA,
            "layout": self.layout,
            "keys": [_key_to_json(k) for k in self.keys],
            "n_actions": list(self.n_actions),
            "logits": list(self.flat),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySnapshot":
        if d.get("schema") != POLICY_SCHEMA:
            raise ValueError(f"expected schema {POLICY_SCHEMA}")
        return cls(tuple(_key_from_json(k) for k in d["keys"]), tuple(int(n) for n in d["n_actions"]),
                   tuple(float(x) for x in d["logits"]), d.get("layout", "shared"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PolicySnapshot":
        return cls.from_dict(json.loads(text))


class TabularSoftmaxPolicy:
    """Softmax over a logit table with one row per decision context.

    Rows are padded to the widest action set; padding entries are masked out
    of the softmax and never appear in the flat parameter vector. The flat
    order is key order, then action order.

    ``layout="per_turn"`` keeps the same rows but exposes them as one table
    per turn. Because a tree bandit key already carries its turn, both
    layouts define the same function; the option exists for comparison.
    """

    def __init__(self, keys: Sequence, n_actions: Sequence[int], logits=None, layout: str = "shared"):
        if layout not in ("shared", "per_turn"):
            raise ValueError("layout must be 'shared' or 'per_turn'")
        self.keys = list(keys)
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate policy keys")
        self.n_actions = np.array(n_actions, dtype=int)
        if self.n_actions.shape != (len(self.keys),) or np.any(self.n_actions < 1):
            raise ValueError("one positive action count per key is required")
        self.layout = layout
        width = int(self.n_actions.max()) if len(self.keys) else 1
        self.valid = np.arange(width)[None, :] < self.n_actions[:, None]
        self.logits = np.zeros((len(self.keys), width))
        if logits is not None:
            self.set_flat(logits)
        self._cache = None

    # construction -----------------------------------------------------------
    @classmethod
    def for_tree_bandit(cls, spec: TreeBanditSpec, init: str = "zero", scale: float = 1.0,
                        seed: int = 0, layout: str = "shared") -> "TabularSoftmaxPolicy":
        keys = tree_keys(spec)
        pol = cls(keys, [spec.actions_per_turn[k.turn - 1] for k in keys], layout=layout)
        pol._initialize(init, scale, seed)
        return pol

    @classmethod
    def for_mdp(cls, spec: FiniteMdpSpec, init: str = "zero", scale: float = 1.0,
                seed: int = 0) -> "TabularSoftmaxPolicy":
        pol = cls([StateKey(s) for s in range(spec.num_states)], [spec.num_actions] * spec.num_states)
        pol._initialize(init, scale, seed)
        return pol

    def _initialize(self, init: str, scale: float, seed: int) -> None:
        if init == "zero":
            return
        if init != "gaussian":
            raise ValueError("init must be 'zero' or 'gaussian'")
        self.set_flat(make_rng(seed, "policy_init").normal(0.0, scale, size=self.num_params))

    # parameters -------------------------------------------------------------
    @property
    def num_params(self) -> int:
        return int(self.n_actions.sum())

    def get_flat(self) -> np.ndarray:
        return self.logits[self.valid].copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        self.logits[self.valid] = flat
        self._cache = None

    def add_to_logits(self, delta: np.ndarray) -> None:
        """In-place ``logits += delta`` for a padded (keys, width) array."""
        self.logits += np.where(self.valid, delta, 0.0)
        self._cache = None

    def flatten(self, padded: np.ndarray) -> np.ndarray:
        return padded[self.valid]

    def unflatten(self, flat: np.ndarray) -> np.ndarray:
        out = np.zeros_like(self.logits)
        out[self.valid] = flat
        return out

    def copy(self) -> "TabularSoftmaxPolicy":
        pol = TabularSoftmaxPolicy(self.keys, self.n_actions, layout=self.layout)
        pol.logits = self.logits.copy()
        return pol

    def snapshot(self) -> PolicySnapshot:
        return PolicySnapshot(tuple(self.keys), tuple(int(n) for n in self.n_actions),
                              tuple(float(x) for x in self.get_flat()), self.layout)

    @staticmethod
    def restore(snapshot: PolicySnapshot) -> "TabularSoftmaxPolicy":
        return snapshot.restore()

    def turn_table(self, turn: int) -> np.ndarray:
        """Logit rows of one turn (tree bandit keys only)."""
        rows = [i for i, k in enumerate(self.keys) if isinstance(k, HistoryKey) and k.turn == turn]
        return self.logits[rows]

    # probabilities ----------------------------------------------------------
    def probs_matrix(self) -> np.ndarray:
        """(keys, width) matrix of action probabilities; padding entries are 0."""
        if self._cache is None:
            z = np.where(self.valid, self.logits, -np.inf)
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            self._cache = e / e.sum(axis=1, keepdims=True)
            self._cache.setflags(write=False)
        return self._cache

    def key_id(self, key) -> int:
        try:
            return self.index[key]
        except KeyError:
            raise KeyError(f"unknown policy key {key!r}") from None

    def action_probs(self, key) -> np.ndarray:
        i = self.key_id(key)
        return self.probs_matrix()[i, : self.n_actions[i]].copy()

    def log_prob(self, key, action: int) -> float:
        i = self.key_id(key)
        if not 0 <= action < self.n_actions[i]:
            raise IndexError(f"action {action} invalid at {key!r}")
        z = self.logits[i, : self.n_actions[i]]
        m = z.max()
        return float(z[action] - m - np.log(np.exp(z - m).sum()))

    def grad_log_prob(self, key, action: int) -> np.ndarray:
        """Flat score vector: one-hot(action) minus probs at the key's block, zero elsewhere."""
        i = self.key_id(key)
        if not 0 <= action < self.n_actions[i]:
            raise IndexError(f"action {action} invalid at {key!r}")
        g = np.zeros_like(self.logits)
        g[i] = -self.probs_matrix()[i]
        g[i, action] += 1.0
        return self.flatten(g)


def sequence_ratio(policy_new: TabularSoftmaxPolicy, policy_old: TabularSoftmaxPolicy, key, action: int) -> float:
    """pi_new(action | key) / pi_old(action | key)."""
    i_new, i_old = policy_new.key_id(key), policy_old.key_id(key)
    return float(policy_new.probs_matrix()[i_new, action] / policy_old.probs_matrix()[i_old, action])


def path_probability(policy: TabularSoftmaxPolicy, spec: TreeBanditSpec, s0: int, path: Sequence[int]) -> float:
    """Probability of a padded path; placeholder turns contribute factor 1."""
    p = 1.0
    for t, a in enumerate(path):
        if spec.is_decision_point(s0, path[:t]):
            p *= policy.action_probs(HistoryKey(s0, tuple(path[:t]), t + 1))[a]
    return p
