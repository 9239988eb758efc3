"""Trajectory collection (sampled or exactly enumerated), groups and turn pools.

The object types (``Trajectory``, ``Group``, ``TurnPool``) are the public
view. Update code works on the array views (``TreeBatch``, ``MdpBatch``),
which carry the same information in a form numpy can chew through.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .envs import FiniteMdpSpec, NOOP_ACTION, TreeBanditSpec
from .policy import HistoryKey, StateKey, TabularSoftmaxPolicy
from .rng import make_rng

BATCH_SCHEMA = "seeupo_lab.batch/1"
MAX_MDP_TRAJECTORIES = 1_000_000


@dataclass(frozen=True)
class Trajectory:
    s0: int
    actions: tuple
    behavior_log_probs: tuple
    reward: float
    weight: float
    placeholder: tuple = ()
    states: tuple = ()  # MDP only: s_0 .. s_{H-1}
    step_rewards: tuple = ()  # MDP only

    def is_placeholder(self, turn: int) -> bool:
        return bool(self.placeholder) and self.placeholder[turn - 1]


@dataclass(frozen=True)
class Group:
    s0: int
    trajectories: tuple
    mean_reward: float
    weight: float = 1.0  # share of the batch objective: d(s0) when exact, 1/B when sampled
    exact: bool = False


@dataclass(frozen=True)
class TurnSample:
    trajectory: int  # index into the flattened trajectory list
    key: HistoryKey | None
    action: int
    is_placeholder: bool


@dataclass
class TurnPool:
    turn: int
    samples: list = field(default_factory=list)


# ------------------------------------------------------------- array views


@dataclass
class TreeBatch:
    s0: np.ndarray
    actions: np.ndarray  # (N, T)
    key_ids: np.ndarray  # (N, T), -1 on placeholder turns
    reward: np.ndarray
    weight: np.ndarray  # within-group weight
    group: np.ndarray
    group_weight: np.ndarray
    exact: bool

    @property
    def n(self) -> int:
        return len(self.reward)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    def sample_weight(self) -> np.ndarray:
        return self.group_weight[self.group] * self.weight

    def group_means(self) -> np.ndarray:
        out = np.zeros(len(self.group_weight))
        np.add.at(out, self.group, self.weight * self.reward)
        return out


@dataclass
class MdpBatch:
    states: np.ndarray  # (N, H)
    actions: np.ndarray  # (N, H)
    rewards: np.ndarray  # (N, H)
    weight: np.ndarray
    group: np.ndarray
    group_weight: np.ndarray
    group_s0: np.ndarray
    exact: bool

    @property
    def n(self) -> int:
        return len(self.weight)

    @property
    def key_ids(self) -> np.ndarray:
        return self.states

    def sample_weight(self) -> np.ndarray:
        return self.group_weight[self.group] * self.weight

    def total_reward(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def group_means(self) -> np.ndarray:
        out = np.zeros(len(self.group_weight))
        np.add.at(out, self.group, self.weight * self.total_reward())
        return out


def tree_step_probs(batch: TreeBatch, policy: TabularSoftmaxPolicy) -> np.ndarray:
    """(N, T) per-turn probabilities of the taken actions; 1 on placeholder turns."""
    probs = policy.probs_matrix()
    live = batch.key_ids >= 0
    return np.where(live, probs[np.where(live, batch.key_ids, 0), batch.actions], 1.0)


def mdp_step_probs(batch: MdpBatch, policy: TabularSoftmaxPolicy) -> np.ndarray:
    return policy.probs_matrix()[batch.states, batch.actions]


# ---------------------------------------------------------- tree bandits


class TreeLayout:
    """Every reachable padded path of a tree bandit, grouped by initial state."""

    def __init__(self, spec: TreeBanditSpec, policy: TabularSoftmaxPolicy):
        self.spec = spec
        T = spec.horizon
        s0s, acts, keys, rewards = [], [], [], []
        for s0 in range(spec.num_initial_states):
            for path in spec.reachable_paths(s0):
                s0s.append(s0)
                acts.append(path)
                keys.append([policy.key_id(HistoryKey(s0, path[:t], t + 1))
                             if spec.is_decision_point(s0, path[:t]) else -1 for t in range(T)])
                rewards.append(spec.reward_table[s0, spec.path_index(path)])
        self.s0 = np.array(s0s, dtype=int)
        self.actions = np.array(acts, dtype=int).reshape(-1, T)
        self.key_ids = np.array(keys, dtype=int).reshape(-1, T)
        self.reward = np.array(rewards, dtype=float)

    def batch(self, policy: TabularSoftmaxPolicy) -> TreeBatch:
        probs = policy.probs_matrix()
        live = self.key_ids >= 0
        step = np.where(live, probs[np.where(live, self.key_ids, 0), self.actions], 1.0)
        return TreeBatch(self.s0, self.actions, self.key_ids, self.reward, step.prod(axis=1),
                         self.s0.copy(), self.spec.initial_distribution.copy(), True)


def _tree_groups(batch: TreeBatch, policy: TabularSoftmaxPolicy, s0_of_group) -> list:
    step = tree_step_probs(batch, policy)
    logp = np.log(step)
    groups = []
    for g in range(len(batch.group_weight)):
        idx = np.flatnonzero(batch.group == g)
        trajs = tuple(
            Trajectory(int(batch.s0[i]), tuple(int(a) for a in batch.actions[i]),
                       tuple(float(x) for x in logp[i]), float(batch.reward[i]), float(batch.weight[i]),
                       tuple(bool(k < 0) for k in batch.key_ids[i]))
            for i in idx)
        mean = float(np.dot(batch.weight[idx], batch.reward[idx]))
        groups.append(Group(int(s0_of_group[g]), trajs, mean, float(batch.group_weight[g]), batch.exact))
    return groups


def _sample_tree_path(spec, policy, s0, rng):
    probs = policy.probs_matrix()
    path, keys = [], []
    for t in range(spec.horizon):
        if spec.is_decision_point(s0, path):
            k = policy.key_id(HistoryKey(s0, tuple(path), t + 1))
            p = probs[k, : policy.n_actions[k]]
            a = int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(p) - 1))
            keys.append(k)
        else:
            a = NOOP_ACTION
            keys.append(-1)
        path.append(a)
    return tuple(path), keys


def sample_tree_batch(spec: TreeBanditSpec, policy: TabularSoftmaxPolicy, B: int, G: int, seed: int) -> tuple:
    if B < 1 or G < 1:
        raise ValueError("B and G must be >= 1")
    starts = make_rng(seed, "initial_states").choice(spec.num_initial_states, size=B, p=spec.initial_distribution)
    s0s, acts, keys, rewards = [], [], [], []
    for b, s0 in enumerate(starts):
        rng = make_rng(seed, "group", b)
        for _ in range(G):
            path, k = _sample_tree_path(spec, policy, int(s0), rng)
            s0s.append(int(s0))
            acts.append(path)
            keys.append(k)
            rewards.append(spec.reward_table[s0, spec.path_index(path)])
    batch = TreeBatch(np.array(s0s), np.array(acts, dtype=int), np.array(keys, dtype=int),
                      np.array(rewards, dtype=float), np.full(B * G, 1.0 / G), np.repeat(np.arange(B), G),
                      np.full(B, 1.0 / B), False)
    return batch, starts


# -------------------------------------------------------------------- MDPs


class MdpLayout:
    """Every positive-probability trajectory of a finite MDP under full-support policies."""

    def __init__(self, spec: FiniteMdpSpec):
        self.spec = spec
        S, A, H = spec.num_states, spec.num_actions, spec.horizon
        starts = np.flatnonzero(spec.initial_distribution > 0)
        states = starts[:, None]
        actions = np.zeros((len(starts), 0), dtype=int)
        trans = np.ones(len(starts))
        for t in range(H):
            n = len(states)
            states = np.repeat(states, A, axis=0)
            actions = np.concatenate([np.repeat(actions, A, axis=0), np.tile(np.arange(A), n)[:, None]], axis=1)
            trans = np.repeat(trans, A)
            if t < H - 1:
                rows = spec.transition[states[:, -1], actions[:, -1]]  # (n*A, S)
                src, nxt = np.nonzero(rows > 0)
                states = np.concatenate([states[src], nxt[:, None]], axis=1)
                actions = actions[src]
                trans = trans[src] * rows[src, nxt]
            if len(states) > MAX_MDP_TRAJECTORIES:
                raise ValueError("too many trajectories for exact mode")
        self.states = states
        self.actions = actions
        self.trans = trans
        self.rewards = spec.reward[states, actions]
        self.s0 = states[:, 0]
        self.group_s0 = starts
        self.group = np.searchsorted(starts, self.s0)

    def batch(self, policy: TabularSoftmaxPolicy) -> MdpBatch:
        step = policy.probs_matrix()[self.states, self.actions]
        return MdpBatch(self.states, self.actions, self.rewards, self.trans * step.prod(axis=1), self.group,
                        self.spec.initial_distribution[self.group_s0].copy(), self.group_s0, True)


def sample_mdp_batch(spec: FiniteMdpSpec, policy: TabularSoftmaxPolicy, B: int, G: int, seed: int) -> MdpBatch:
    if B < 1 or G < 1:
        raise ValueError("B and G must be >= 1")
    S, H = spec.num_states, spec.horizon
    starts = make_rng(seed, "initial_states").choice(S, size=B, p=spec.initial_distribution)
    probs = policy.probs_matrix()
    states = np.zeros((B * G, H), dtype=int)
    actions = np.zeros((B * G, H), dtype=int)
    for b, s0 in enumerate(starts):
        rng = make_rng(seed, "group", b)
        for j in range(G):
            s = int(s0)
            for t in range(H):
                i = b * G + j
                states[i, t] = s
                a = int(min(np.searchsorted(np.cumsum(probs[s]), rng.random(), side="right"), spec.num_actions - 1))
                actions[i, t] = a
                row = spec.transition[s, a]
                s = int(min(np.searchsorted(np.cumsum(row), rng.random(), side="right"), S - 1))
    return MdpBatch(states, actions, spec.reward[states, actions], np.full(B * G, 1.0 / G),
                    np.repeat(np.arange(B), G), np.full(B, 1.0 / B), np.asarray(starts), False)


def _mdp_groups(batch: MdpBatch, policy: TabularSoftmaxPolicy) -> list:
    logp = np.log(mdp_step_probs(batch, policy))
    totals = batch.total_reward()
    groups = []
    for g in range(len(batch.group_weight)):
        idx = np.flatnonzero(batch.group == g)
        trajs = tuple(
            Trajectory(int(batch.states[i, 0]), tuple(int(a) for a in batch.actions[i]),
                       tuple(float(x) for x in logp[i]), float(totals[i]), float(batch.weight[i]),
                       (), tuple(int(s) for s in batch.states[i]), tuple(float(r) for r in batch.rewards[i]))
            for i in idx)
        groups.append(Group(int(batch.group_s0[g]), trajs, float(np.dot(batch.weight[idx], totals[idx])),
                            float(batch.group_weight[g]), batch.exact))
    return groups


# ---------------------------------------------------------------- public ops


def enumerate_batch(env, policy: TabularSoftmaxPolicy) -> list:
    """One group per initial state holding every path, weighted by its probability."""
    if isinstance(env, TreeBanditSpec):
        batch = TreeLayout(env, policy).batch(policy)
        return _tree_groups(batch, policy, np.arange(env.num_initial_states))
    return _mdp_groups(MdpLayout(env).batch(policy), policy)


def collect_batch(env, policy: TabularSoftmaxPolicy, B: int, G: int, seed: int) -> list:
    """B groups of G sampled trajectories; each group has its own RNG stream."""
    if isinstance(env, TreeBanditSpec):
        batch, starts = sample_tree_batch(env, policy, B, G, seed)
        return _tree_groups(batch, policy, starts)
    return _mdp_groups(sample_mdp_batch(env, policy, B, G, seed), policy)


def tree_batch_from_groups(groups: list, policy: TabularSoftmaxPolicy) -> TreeBatch:
    s0s, acts, keys, rewards, weights, gidx = [], [], [], [], [], []
    for g, group in enumerate(groups):
        for tr in group.trajectories:
            s0s.append(tr.s0)
            acts.append(tr.actions)
            keys.append([-1 if tr.is_placeholder(t + 1) else policy.key_id(HistoryKey(tr.s0, tr.actions[:t], t + 1))
                         for t in range(len(tr.actions))])
            rewards.append(tr.reward)
            weights.append(tr.weight)
            gidx.append(g)
    return TreeBatch(np.array(s0s, dtype=int), np.array(acts, dtype=int), np.array(keys, dtype=int),
                     np.array(rewards, dtype=float), np.array(weights, dtype=float), np.array(gidx, dtype=int),
                     np.array([g.weight for g in groups], dtype=float), all(g.exact for g in groups))


def mdp_batch_from_groups(groups: list) -> MdpBatch:
    trajs = [tr for g in groups for tr in g.trajectories]
    gidx = np.array([g for g, group in enumerate(groups) for _ in group.trajectories], dtype=int)
    return MdpBatch(np.array([t.states for t in trajs], dtype=int), np.array([t.actions for t in trajs], dtype=int),
                    np.array([t.step_rewards for t in trajs], dtype=float), np.array([t.weight for t in trajs]),
                    gidx, np.array([g.weight for g in groups]), np.array([g.s0 for g in groups], dtype=int),
                    all(g.exact for g in groups))


def build_turn_pools(groups: list) -> list:
    """Reorganize trajectories into one pool per turn; placeholder turns stay in, flagged."""
    if not groups:
        raise ValueError("need at least one group")
    trajs = [tr for g in groups for tr in g.trajectories]
    T = len(trajs[0].actions)
    pools = [TurnPool(turn=t) for t in range(1, T + 1)]
    for i, tr in enumerate(trajs):
        for t in range(1, T + 1):
            ph = tr.is_placeholder(t)
            if tr.states:
                key = StateKey(tr.states[t - 1])
            else:
                key = None if ph else HistoryKey(tr.s0, tr.actions[: t - 1], t)
            pools[t - 1].samples.append(TurnSample(i, key, tr.actions[t - 1], ph))
    return pools


def groups_to_json(groups: list) -> str:
    data = {"schema": BATCH_SCHEMA, "groups": [
        {"s0": g.s0, "mean_reward": g.mean_reward, "weight": g.weight, "exact": g.exact,
         "trajectories": [{"s0": t.s0, "actions": list(t.actions), "behavior_log_probs": list(t.behavior_log_probs),
                           "reward": t.reward, "weight": t.weight, "placeholder": list(t.placeholder),
                           "states": list(t.states), "step_rewards": list(t.step_rewards)}
                          for t in g.trajectories]} for g in groups]}
    return json.dumps(data, sort_keys=True)


def groups_from_json(text: str) -> list:
    data = json.loads(text)
    if data.get("schema") != BATCH_SCHEMA:
        raise ValueError(f"expected schema {BATCH_SCHEMA}")
    return [Group(g["s0"], tuple(Trajectory(t["s0"], tuple(t["actions"]), tuple(t["behavior_log_probs"]),
                                            t["reward"], t["weight"], tuple(t["placeholder"]), tuple(t["states"]),
                                            tuple(t["step_rewards"])) for t in g["trajectories"]),
                  g["mean_reward"], g["weight"], g["exact"]) for g in data["groups"]]
