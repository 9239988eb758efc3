"""Value oracle, GAE, GRAE, and the batch/group normalizers.

All standard deviations are population (divide by the total weight), and a
batch or group whose spread is numerically zero passes through unchanged
with a flag set.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .envs import FiniteMdpSpec, NOOP_ACTION, TreeBanditSpec
from .policy import HistoryKey, TabularSoftmaxPolicy
from .rollout import Group, MdpBatch, MdpLayout, TreeBatch

ESTIMATORS = ("GAE", "GRAE", "GRAE-LOO")
NORMALIZATIONS = ("none", "batch", "group")
DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class ValueTable:
    """State values and action values of a fixed policy.

    For an MDP, ``v`` is (S, H+1) with ``v[:, H] == 0`` and ``q`` is (S, A, H).
    For a tree bandit, both are dicts keyed by (s0, prefix); ``q`` only holds
    live decision points.
    """

    v: object
    q: object
    discount: float
    kind: str

    def advantage(self) -> np.ndarray:
        if self.kind != "mdp":
            raise TypeError("array advantages are defined for MDP tables")
        return self.q - self.v[:, None, :-1]


def _mdp_values(spec: FiniteMdpSpec, policy: TabularSoftmaxPolicy, gamma: float) -> ValueTable:
    S, A, H = spec.num_states, spec.num_actions, spec.horizon
    pi = policy.probs_matrix()[:, :A]
    v = np.zeros((S, H + 1))
    q = np.zeros((S, A, H))
    for t in range(H - 1, -1, -1):
        q[:, :, t] = spec.reward + gamma * spec.transition @ v[:, t + 1]
        v[:, t] = (pi * q[:, :, t]).sum(axis=1)
    return ValueTable(v, q, gamma, "mdp")


def _tree_values(spec: TreeBanditSpec, policy: TabularSoftmaxPolicy) -> ValueTable:
    v, q = {}, {}
    probs = policy.probs_matrix()
    for s0 in range(spec.num_initial_states):
        for t in range(spec.horizon, -1, -1):
            for prefix in itertools.product(*(range(n) for n in spec.actions_per_turn[:t])):
                k = spec.ended_after(s0, prefix)
                if k is not None and k < t:
                    continue
                if t == spec.horizon or k == t:
                    padded = prefix + (NOOP_ACTION,) * (spec.horizon - t)
                    v[(s0, prefix)] = float(spec.reward_table[s0, spec.path_index(padded)])
                    continue
                qa = np.array([v[(s0, prefix + (a,))] for a in range(spec.actions_per_turn[t])])
                i = policy.key_id(HistoryKey(s0, prefix, t + 1))
                q[(s0, prefix)] = qa
                v[(s0, prefix)] = float(np.dot(probs[i, : len(qa)], qa))
    return ValueTable(v, q, 1.0, "tree")


def exact_values(env, policy: TabularSoftmaxPolicy, discount: float | None = None) -> ValueTable:
    """Backward dynamic programming: finite horizon for MDPs, over histories for tree bandits."""
    if isinstance(env, FiniteMdpSpec):
        return _mdp_values(env, policy, env.discount if discount is None else discount)
    return _tree_values(env, policy)


def exact_return(env, policy: TabularSoftmaxPolicy) -> float:
    """J(pi): expected (discounted, for MDPs) return from the initial distribution."""
    vt = exact_values(env, policy)
    if vt.kind == "mdp":
        return float(np.dot(env.initial_distribution, vt.v[:, 0]))
    return float(sum(env.initial_distribution[s] * vt.v[(s, ())] for s in range(env.num_initial_states)))


# ----------------------------------------------------------------------- GAE


def _value_array(values) -> np.ndarray:
    return values.v if isinstance(values, ValueTable) else np.asarray(values, dtype=float)


def gae_estimate(trajectory, values, gamma: float, lam: float) -> np.ndarray:
    """Per-step GAE for one MDP trajectory, truncated at the horizon.

    ``values`` is a ValueTable or an (S, H+1) array (possibly perturbed).
    """
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lambda must lie in [0, 1]")
    v = _value_array(values)
    states = list(trajectory.states)
    rewards = np.asarray(trajectory.step_rewards, dtype=float)
    H = len(states)
    if v.ndim != 2 or v.shape[1] < H or not states or max(states) >= v.shape[0]:
        raise KeyError("value table does not cover the trajectory")
    # the value after the final step is zero by definition of the horizon
    vs = np.array([v[s, t] for t, s in enumerate(states)] + [0.0])
    delta = rewards + gamma * vs[1:] - vs[:-1]
    adv = np.zeros(H)
    acc = 0.0
    for t in range(H - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv


def gae_batch(batch: MdpBatch, values, gamma: float, lam: float) -> np.ndarray:
    """Vectorized GAE for every trajectory of an MDP batch, shape (N, H)."""
    v = _value_array(values)
    N, H = batch.states.shape
    vs = np.zeros((N, H + 1))
    vs[:, :H] = v[batch.states, np.arange(H)[None, :]]
    delta = batch.rewards + gamma * vs[:, 1:] - vs[:, :-1]
    adv = np.zeros((N, H))
    acc = np.zeros(N)
    for t in range(H - 1, -1, -1):
        acc = delta[:, t] + gamma * lam * acc
        adv[:, t] = acc
    return adv


def gae_expected(spec: FiniteMdpSpec, policy: TabularSoftmaxPolicy, values, gamma: float, lam: float) -> np.ndarray:
    """E[GAE_t | s_t=s, a_t=a] for every (s, a, t), computed analytically.

    Uses the backward recursion G_u = dbar_u + gamma*lam * P_pi G_{u+1} over the
    policy-averaged TD errors, so no trajectories are sampled or enumerated.
    """
    v = _value_array(values)
    S, A, H = spec.num_states, spec.num_actions, spec.horizon
    pi = policy.probs_matrix()[:, :A]
    p_pi = np.einsum("sa,sax->sx", pi, spec.transition)
    delta = np.zeros((S, A, H))
    for u in range(H):
        nxt = v[:, u + 1] if u + 1 < H else np.zeros(S)
        delta[:, :, u] = spec.reward + gamma * spec.transition @ nxt - v[:, u][:, None]
    out = np.zeros((S, A, H))
    g_next = np.zeros(S)
    for t in range(H - 1, -1, -1):
        out[:, :, t] = delta[:, :, t] + gamma * lam * spec.transition @ g_next
        g_next = (pi * delta[:, :, t]).sum(axis=1) + gamma * lam * p_pi @ g_next
    return out


def gae_bias_bound(gamma: float, lam: float, eps_max: float) -> float:
    """Worst-case GAE bias for value errors bounded by eps_max."""
    if gamma * lam >= 1.0:
        raise ValueError("bound requires gamma * lambda < 1")
    return (1.0 + gamma - 2.0 * gamma * lam) / (1.0 - gamma * lam) * eps_max


# ---------------------------------------------------------------------- GRAE


def grae_estimate(group: Group, leave_one_out: bool = False) -> np.ndarray:
    """Reward minus the group baseline, one value per trajectory.

    In exact mode the baseline is the probability-weighted mean, i.e. the
    true value of the initial state. With ``leave_one_out`` each sample is
    compared with the mean of the other G-1 samples.
    """
    r = np.array([t.reward for t in group.trajectories], dtype=float)
    if leave_one_out:
        if group.exact:
            raise ValueError("leave-one-out needs sampled groups")
        G = len(r)
        if G < 2:
            raise ValueError("leave-one-out needs G >= 2")
        return r - (r.sum() - r) / (G - 1)
    return r - group.mean_reward


def grae_batch(batch, leave_one_out: bool = False) -> np.ndarray:
    """Joint GRAE advantage per trajectory for a TreeBatch or MdpBatch."""
    r = batch.reward if isinstance(batch, TreeBatch) else batch.total_reward()
    if leave_one_out:
        if batch.exact:
            raise ValueError("leave-one-out needs sampled groups")
        sums = np.bincount(batch.group, weights=r, minlength=len(batch.group_weight))
        counts = np.bincount(batch.group, minlength=len(batch.group_weight))
        if np.any(counts[batch.group] < 2):
            raise ValueError("leave-one-out needs G >= 2")
        return r - (sums[batch.group] - r) / (counts[batch.group] - 1)
    return r - batch.group_means()[batch.group]


def group_stds(batch) -> np.ndarray:
    """Weighted population std of rewards within each group."""
    r = batch.reward if isinstance(batch, TreeBatch) else batch.total_reward()
    means = batch.group_means()
    var = np.zeros(len(batch.group_weight))
    np.add.at(var, batch.group, batch.weight * (r - means[batch.group]) ** 2)
    return np.sqrt(np.maximum(var, 0.0))


def grae_conditional_bias(spec: FiniteMdpSpec, policy: TabularSoftmaxPolicy, condition: str = "history") -> list:
    """Exact E[GRAE | context, a_t] - A(s_t, a_t) at every reachable step.

    GRAE uses the undiscounted total return with the exact group baseline
    V(s_0). With ``condition="history"`` the context is the full history,
    which is the state of a token-level MDP; its value is the reward already
    collected plus the continuation value. With ``condition="state"`` the
    context is (t, s_t) only. Returns dicts with the measured bias and the
    predicted V(context) - V(s_0).
    """
    layout = MdpLayout(spec)
    vt = _mdp_values(spec, policy, 1.0)
    H = spec.horizon
    w = layout.trans * policy.probs_matrix()[layout.states, layout.actions].prod(axis=1)
    w = w * spec.initial_distribution[layout.s0]
    total = layout.rewards.sum(axis=1)
    adv = total - vt.v[layout.s0, 0]
    past = np.concatenate([np.zeros((len(w), 1)), np.cumsum(layout.rewards, axis=1)[:, :-1]], axis=1)
    out = []
    for t in range(H):
        if condition == "history":
            ctx = np.concatenate([layout.states[:, : t + 1], layout.actions[:, : t + 1]], axis=1)
        elif condition == "state":
            ctx = np.stack([layout.states[:, t], layout.actions[:, t]], axis=1)
        else:
            raise ValueError("condition must be 'history' or 'state'")
        _, inv = np.unique(ctx, axis=0, return_inverse=True)
        inv = inv.ravel()
        wsum = np.bincount(inv, weights=w)
        keep = wsum > 0
        mean_adv = np.bincount(inv, weights=w * adv)[keep] / wsum[keep]
        ctx_value = np.bincount(inv, weights=w * (past[:, t] + vt.v[layout.states[:, t], t]))[keep] / wsum[keep]
        v0 = np.bincount(inv, weights=w * vt.v[layout.s0, 0])[keep] / wsum[keep]
        first = np.zeros(len(wsum), dtype=int)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        rows = first[keep]
        s_t, a_t = layout.states[rows, t], layout.actions[rows, t]
        true_adv = vt.q[s_t, a_t, t] - vt.v[s_t, t]
        for j in range(len(rows)):
            out.append({"t": t, "state": int(s_t[j]), "action": int(a_t[j]),
                        "bias": float(mean_adv[j] - true_adv[j]),
                        "predicted": float(ctx_value[j] - v0[j])})
    return out


# ------------------------------------------------------------- normalizers


def batch_stats(raw: np.ndarray, weights: np.ndarray | None = None) -> tuple:
    """Weighted mean and population std of a batch of advantages."""
    raw = np.asarray(raw, dtype=float)
    w = np.full(raw.shape, 1.0 / raw.size) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    mu = float(np.dot(w.ravel(), raw.ravel()))
    sigma = float(np.sqrt(max(np.dot(w.ravel(), (raw.ravel() - mu) ** 2), 0.0)))
    return mu, sigma


def _degenerate(sigma: float, raw: np.ndarray) -> bool:
    return sigma <= DEGENERATE_RTOL * max(1.0, float(np.max(np.abs(raw))) if raw.size else 1.0)


def normalize_batch_values(raw, weights=None) -> tuple:
    """(normalized, mean, std, degenerate)."""
    raw = np.asarray(raw, dtype=float)
    mu, sigma = batch_stats(raw, weights)
    if _degenerate(sigma, raw):
        return raw.copy(), mu, sigma, True
    return (raw - mu) / sigma, mu, sigma, False


def normalize_group_values(adv, group_index, stds) -> tuple:
    """Divide each advantage by its group's reward std; (normalized, degenerate-per-group)."""
    adv = np.asarray(adv, dtype=float)
    stds = np.asarray(stds, dtype=float)
    degenerate = np.array([_degenerate(s, adv[group_index == g]) for g, s in enumerate(stds)], dtype=bool)
    scale = np.where(degenerate, 1.0, stds)
    return adv / scale[group_index], degenerate


@dataclass(frozen=True)
class AdvantageRecord:
    trajectory: int
    turn: int  # 0 for sequence-level (joint) advantages
    estimator: str
    raw: float
    normalized: float
    normalization: str = "none"
    weight: float = 1.0
    group: int = 0
    group_std: float = float("nan")
    batch_mean: float = float("nan")
    batch_std: float = float("nan")
    degenerate: bool = False


def make_records(raw, estimator: str, weights=None, groups=None, group_std=None, turn: int = 0) -> list:
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    raw = np.asarray(raw, dtype=float)
    weights = np.full(raw.size, 1.0 / raw.size) if weights is None else np.asarray(weights, dtype=float)
    groups = np.zeros(raw.size, dtype=int) if groups is None else np.asarray(groups, dtype=int)
    gstd = [float("nan")] * raw.size if group_std is None else [float(group_std[g]) for g in groups]
    return [AdvantageRecord(i, turn, estimator, float(raw[i]), float(raw[i]), "none", float(weights[i]),
                            int(groups[i]), gstd[i]) for i in range(raw.size)]


def normalize_batch(records: list) -> list:
    """Batch-level standardization; records carry the statistics used."""
    raw = np.array([r.raw for r in records])
    norm, mu, sigma, degenerate = normalize_batch_values(raw, np.array([r.weight for r in records]))
    return [replace(r, normalized=float(x), normalization="batch", batch_mean=mu, batch_std=sigma,
                    degenerate=degenerate) for r, x in zip(records, norm)]


def normalize_group(records: list) -> list:
    """Divide every record by its own group's std (taken from ``group_std``)."""
    raw = np.array([r.raw for r in records])
    gidx = np.array([r.group for r in records], dtype=int)
    n_groups = int(gidx.max()) + 1 if len(gidx) else 0
    stds = np.zeros(n_groups)
    for r in records:
        if np.isnan(r.group_std):
            raise ValueError("group normalization needs group_std on every record")
        stds[r.group] = r.group_std
    norm, degenerate = normalize_group_values(raw, gidx, stds)
    return [replace(r, normalized=float(x), normalization="group", degenerate=bool(degenerate[r.group]))
            for r, x in zip(records, norm)]
