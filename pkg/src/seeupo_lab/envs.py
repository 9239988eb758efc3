"""Environment families: multi-turn tree bandits and finite-horizon MDPs.

Tree bandit rewards live in a dense table indexed by the mixed-radix code of
the full action path, so enumeration is exhaustive by construction.
Episodes that end before the last turn are padded with the no-op action
(index 0) on every remaining turn; the reward of the padded path is read
from the table like any other entry.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .rng import make_rng

MAX_TOTAL_PATHS = 100_000
TREE_SCHEMA = "seeupo_lab.tree_bandit/1"
MDP_SCHEMA = "seeupo_lab.finite_mdp/1"
NOOP_ACTION = 0
_TOL = 1e-12


class SpecError(ValueError):
    """Raised when an environment spec or shape is invalid."""


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim != 1 or p.size == 0:
        raise SpecError(f"{name} must be a nonempty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > _TOL:
        raise SpecError(f"{name} must be nonnegative and sum to 1")


# ---------------------------------------------------------------- tree bandit


@dataclass(frozen=True, eq=False)
class TreeBanditSpec:
    num_initial_states: int
    horizon: int
    actions_per_turn: tuple
    reward_table: np.ndarray  # (num_initial_states, num_paths)
    initial_distribution: np.ndarray
    reward_bound: float
    terminal_prefixes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "actions_per_turn", tuple(int(n) for n in self.actions_per_turn))
        object.__setattr__(self, "reward_table", _frozen(self.reward_table))
        object.__setattr__(self, "initial_distribution", _frozen(self.initial_distribution))
        object.__setattr__(self, "reward_bound", float(self.reward_bound))
        prefixes = frozenset((int(s), tuple(int(a) for a in p)) for s, p in self.terminal_prefixes)
        object.__setattr__(self, "terminal_prefixes", prefixes)
        self.validate()

    @property
    def num_paths(self) -> int:
        return int(np.prod(self.actions_per_turn))

    def validate(self) -> None:
        T = self.horizon
        if T < 1 or len(self.actions_per_turn) != T:
            raise SpecError("horizon must be >= 1 and match actions_per_turn")
        if any(n < 1 for n in self.actions_per_turn):
            raise SpecError("every turn needs at least one action")
        if self.num_initial_states < 1:
            raise SpecError("need at least one initial state")
        if self.num_initial_states * self.num_paths > MAX_TOTAL_PATHS:
            raise SpecError(f"more than {MAX_TOTAL_PATHS} total paths")
        if self.reward_table.shape != (self.num_initial_states, self.num_paths):
            raise SpecError("reward table must have one entry per (s0, path)")
        if not np.all(np.isfinite(self.reward_table)):
            raise SpecError("rewards must be finite")
        if np.any(np.abs(self.reward_table) > self.reward_bound):
            raise SpecError("reward exceeds reward_bound")
        if self.initial_distribution.shape != (self.num_initial_states,):
            raise SpecError("initial_distribution has the wrong length")
        _check_distribution(self.initial_distribution, "initial_distribution")
        for s0, prefix in self.terminal_prefixes:
            if not 0 <= s0 < self.num_initial_states:
                raise SpecError("terminal prefix has an invalid initial state")
            if not 1 <= len(prefix) < T:
                raise SpecError("terminal prefixes must end strictly before the last turn")
            if not self._valid_prefix(prefix):
                raise SpecError("terminal prefix holds an invalid action")
            for k in range(1, len(prefix)):
                if (s0, prefix[:k]) in self.terminal_prefixes:
                    raise SpecError("terminal prefixes must not extend each other")

    def _valid_prefix(self, prefix: Sequence[int]) -> bool:
        return all(0 <= a < self.actions_per_turn[t] for t, a in enumerate(prefix))

    def path_index(self, path: Sequence[int]) -> int:
        if len(path) != self.horizon or not self._valid_prefix(path):
            raise SpecError(f"invalid action path {tuple(path)}")
        idx = 0
        for a, n in zip(path, self.actions_per_turn):
            idx = idx * n + int(a)
        return idx

    def reward(self, s0: int, path: Sequence[int]) -> float:
        return float(self.reward_table[s0, self.path_index(path)])

    def ended_after(self, s0: int, prefix: Sequence[int]) -> int | None:
        """Length of the terminal prefix contained in ``prefix``, if any."""
        prefix = tuple(prefix)
        for k in range(1, len(prefix) + 1):
            if (s0, prefix[:k]) in self.terminal_prefixes:
                return k
        return None

    def is_decision_point(self, s0: int, prefix: Sequence[int]) -> bool:
        """True when the policy acts after ``prefix`` (the episode is still live)."""
        return len(prefix) < self.horizon and self.ended_after(s0, prefix) is None

    def reachable_paths(self, s0: int) -> Iterator[tuple]:
        """Padded paths the episode can actually produce, lexicographic."""
        for path in itertools.product(*(range(n) for n in self.actions_per_turn)):
            k = self.ended_after(s0, path[:-1])
            if k is None or all(a == NOOP_ACTION for a in path[k:]):
                yield path

    def to_dict(self) -> dict:
        return {
            "schema": TREE_SCHEMA,
            "kind": "tree_bandit",
            "num_initial_states": self.num_initial_states,
            "horizon": self.horizon,
            "actions_per_turn": list(self.actions_per_turn),
            "reward_table": self.reward_table.tolist(),
            "initial_distribution": self.initial_distribution.tolist(),
            "reward_bound": self.reward_bound,
            "terminal_prefixes": sorted([s, list(p)] for s, p in self.terminal_prefixes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeBanditSpec":
        if d.get("schema") != TREE_SCHEMA:
            raise SpecError(f"expected schema {TREE_SCHEMA}")
        return cls(
            num_initial_states=int(d["num_initial_states"]),
            horizon=int(d["horizon"]),
            actions_per_turn=d["actions_per_turn"],
            reward_table=np.asarray(d["reward_table"], dtype=float),
            initial_distribution=np.asarray(d["initial_distribution"], dtype=float),
            reward_bound=float(d["reward_bound"]),
            terminal_prefixes=frozenset((s, tuple(p)) for s, p in d.get("terminal_prefixes", [])),
        )


@dataclass(frozen=True)
class TreeBanditShape:
    """Ranges for random tree bandits. Ints are fixed values, pairs are inclusive ranges."""

    num_states: int | tuple = 1
    horizon: int | tuple = 2
    actions: int | tuple | list = 2
    reward_range: tuple = (0.0, 1.0)
    random_initial_distribution: bool = False
    early_stop_prob: float = 0.0


def _pick(rng: np.random.Generator, value) -> int:
    if isinstance(value, tuple):
        lo, hi = value
        return int(rng.integers(lo, hi + 1))
    return int(value)


def generate_tree_bandit(seed: int, shape: TreeBanditShape) -> TreeBanditSpec:
    rng = make_rng(seed, "tree_bandit")
    S = _pick(rng, shape.num_states)
    T = _pick(rng, shape.horizon)
    if T < 1:
        raise SpecError("horizon must be >= 1")
    if isinstance(shape.actions, list):
        if len(shape.actions) != T:
            raise SpecError("explicit action list must have one entry per turn")
        actions = [int(n) for n in shape.actions]
    else:
        actions = [_pick(rng, shape.actions) for _ in range(T)]
    if any(n < 1 for n in actions):
        raise SpecError("action counts must be positive")
    if S < 1:
        raise SpecError("need at least one initial state")
    n_paths = int(np.prod(actions))
    if S * n_paths > MAX_TOTAL_PATHS:
        raise SpecError(f"more than {MAX_TOTAL_PATHS} total paths")
    lo, hi = shape.reward_range
    table = rng.uniform(lo, hi, size=(S, n_paths))
    if shape.random_initial_distribution:
        d0 = rng.dirichlet(np.ones(S))
        d0 = d0 / d0.sum()
    else:
        d0 = np.full(S, 1.0 / S)
    prefixes = set()
    if shape.early_stop_prob > 0 and T > 1:
        for s0 in range(S):
            for t in range(1, T):
                for prefix in itertools.product(*(range(n) for n in actions[:t])):
                    if any((s0, prefix[:k]) in prefixes for k in range(1, t)):
                        continue
                    if rng.random() < shape.early_stop_prob:
                        prefixes.add((s0, prefix))
    bound = float(np.max(np.abs(table)))
    return TreeBanditSpec(S, T, tuple(actions), table, d0, bound, frozenset(prefixes))


def enumerate_paths(spec: TreeBanditSpec, s0: int) -> list:
    """Every (path, reward) for ``s0`` in lexicographic order."""
    if not 0 <= s0 < spec.num_initial_states:
        raise SpecError(f"invalid initial state {s0}")
    paths = itertools.product(*(range(n) for n in spec.actions_per_turn))
    return [(p, float(r)) for p, r in zip(paths, spec.reward_table[s0])]


# ----------------------------------------------------------------------- MDPs


@dataclass(frozen=True, eq=False)
class FiniteMdpSpec:
    num_states: int
    num_actions: int
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    horizon: int
    discount: float
    initial_distribution: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "initial_distribution", _frozen(self.initial_distribution))
        object.__setattr__(self, "discount", float(self.discount))
        self.validate()

    def validate(self) -> None:
        S, A = self.num_states, self.num_actions
        if S < 1 or A < 1 or self.horizon < 1:
            raise SpecError("states, actions and horizon must be positive")
        if self.transition.shape != (S, A, S) or self.reward.shape != (S, A):
            raise SpecError("transition/reward shapes do not match")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=2) - 1) > _TOL):
            raise SpecError("transition rows must be distributions")
        if not 0.0 <= self.discount <= 1.0:
            raise SpecError("discount must lie in [0, 1]")
        if self.initial_distribution.shape != (S,):
            raise SpecError("initial_distribution has the wrong length")
        _check_distribution(self.initial_distribution, "initial_distribution")

    def with_discount(self, discount: float) -> "FiniteMdpSpec":
        return FiniteMdpSpec(self.num_states, self.num_actions, self.transition, self.reward,
                             self.horizon, discount, self.initial_distribution)

    def to_dict(self) -> dict:
        return {
            "schema": MDP_SCHEMA,
            "kind": "finite_mdp",
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "horizon": self.horizon,
            "discount": self.discount,
            "initial_distribution": self.initial_distribution.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteMdpSpec":
        if d.get("schema") != MDP_SCHEMA:
            raise SpecError(f"expected schema {MDP_SCHEMA}")
        return cls(int(d["num_states"]), int(d["num_actions"]),
                   np.asarray(d["transition"], dtype=float), np.asarray(d["reward"], dtype=float),
                   int(d["horizon"]), float(d["discount"]),
                   np.asarray(d["initial_distribution"], dtype=float))


@dataclass(frozen=True)
class MdpShape:
    num_states: int | tuple = 2
    num_actions: int | tuple = 2
    horizon: int | tuple = 2
    discount: float = 1.0
    reward_range: tuple = (-1.0, 1.0)
    deterministic: bool = False
    random_initial_distribution: bool = True


def generate_finite_mdp(seed: int, shape: MdpShape) -> FiniteMdpSpec:
    rng = make_rng(seed, "finite_mdp")
    S = _pick(rng, shape.num_states)
    A = _pick(rng, shape.num_actions)
    H = _pick(rng, shape.horizon)
    if S < 1 or A < 1 or H < 1:
        raise SpecError("states, actions and horizon must be positive")
    if shape.deterministic:
        nxt = rng.integers(0, S, size=(S, A))
        P = np.zeros((S, A, S))
        P[np.arange(S)[:, None], np.arange(A)[None, :], nxt] = 1.0
    else:
        P = rng.random((S, A, S)) + 1e-3
        P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(*shape.reward_range, size=(S, A))
    if shape.random_initial_distribution:
        d0 = rng.dirichlet(np.ones(S))
        d0 /= d0.sum()
    else:
        d0 = np.full(S, 1.0 / S)
    return FiniteMdpSpec(S, A, P, R, H, shape.discount, d0)


# ------------------------------------------------------- degradation instance

# State 0 is the start, state 1 the high-value state, state 2 a trap that
# balances the start value to zero. At state 1, action 0 is the good action
# and action 1 the bad one.
DEGRADATION_GOOD, DEGRADATION_BAD = 0, 1
DEGRADATION_REFERENCE_PROBS = np.array([
    [0.5, 0.5],
    [5.0 / 7.0, 2.0 / 7.0],
    [0.5, 0.5],
])
DEGRADATION_REFERENCE_LOGITS = np.array([
    [0.0, 0.0],
    [np.log(5.0), np.log(2.0)],
    [0.0, 0.0],
])


def build_degradation_mdp() -> FiniteMdpSpec:
    """Two-step MDP with V(start)=0 and V(high)=10 under the reference policy.

    From the start both actions move to the high-value state or the trap
    with probability 1/2 each and pay nothing. At the high-value state the
    good action pays 12 and the bad action pays 5; under the reference
    probabilities (5/7, 2/7) that state is worth 10, so the true advantages
    are +2 and -5. Every trap action pays -10, which pins the start value at 0.
    """
    P = np.zeros((3, 2, 3))
    P[0, :, 1] = 0.5
    P[0, :, 2] = 0.5
    P[1, :, 1] = 1.0
    P[2, :, 2] = 1.0
    R = np.array([[0.0, 0.0], [12.0, 5.0], [-10.0, -10.0]])
    return FiniteMdpSpec(3, 2, P, R, 2, 1.0, np.array([1.0, 0.0, 0.0]))


# ---------------------------------------------------------------- JSON helpers


def spec_to_json(spec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True, indent=1)


def spec_from_json(text: str):
    d = json.loads(text)
    if d.get("kind") == "tree_bandit":
        return TreeBanditSpec.from_dict(d)
    if d.get("kind") == "finite_mdp":
        return FiniteMdpSpec.from_dict(d)
    raise SpecError(f"unknown spec kind {d.get('kind')!r}")
