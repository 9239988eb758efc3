"""Sequential turn-by-turn clipped updates with a joint group-relative advantage.

One iteration:

1. collect (or enumerate) a batch and compute the joint advantage r - mean(r)
   per trajectory, optionally batch-normalized once for the whole iteration;
2. set M = advantage;
3. for each turn t in the update order, run the clipped objective on the
   turn-t samples with ratio pi(a^t)/pi_start(a^t) and weight M, then
   multiply M by that ratio as it stands after the turn's optimization.

The ratio denominator is always the policy frozen at the start of the
iteration, never the policy left behind by the previous turn.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .advantage import batch_stats, grae_batch
from .envs import TreeBanditSpec
from .policy import TabularSoftmaxPolicy
from .report import ExperimentReport
from .rng import make_rng
from .rollout import Group, TreeBatch, TurnPool, tree_batch_from_groups, tree_step_probs
from .updates import (BatchSource, Optimizer, UpdateConfig, _advantage_rows, _normalize_joint,
                      clipped_ratio_update)

ORDERS = ("reverse", "natural", "random")


def update_order(order: str, horizon: int, seed: int = 0, iteration: int = 0) -> list:
    """Turns (1-based) in the order they are optimized."""
    if order == "reverse":
        return list(range(horizon, 0, -1))
    if order == "natural":
        return list(range(1, horizon + 1))
    if order == "random":
        perm = make_rng(seed, "update_order", iteration).permutation(horizon)
        return [int(t) + 1 for t in perm]
    raise ValueError(f"order must be one of {ORDERS}")


@dataclass
class MTable:
    """Per-trajectory running weight; ``next_turn`` is T+1 before any turn is processed."""

    values: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray
    next_turn: int
    processed: list = field(default_factory=list)


def init_M(groups_or_batch, advantages, horizon: int | None = None) -> MTable:
    """M starts equal to the joint advantage of every trajectory."""
    adv = np.array(advantages, dtype=float)
    if isinstance(groups_or_batch, TreeBatch):
        weights = groups_or_batch.sample_weight()
        T = groups_or_batch.horizon
    else:
        trajs = [(g, t) for g in groups_or_batch for t in g.trajectories]
        weights = np.array([g.weight * t.weight for g, t in trajs])
        T = len(trajs[0][1].actions) if trajs else 0
    if horizon is not None:
        T = horizon
    if adv.shape != weights.shape:
        raise ValueError("one advantage per trajectory is required")
    return MTable(adv.copy(), adv.copy(), weights, T + 1)


def _turn_ratio(batch: TreeBatch, t: int, policy_new, policy_start) -> np.ndarray:
    new = tree_step_probs(batch, policy_new)[:, t - 1]
    old = tree_step_probs(batch, policy_start)[:, t - 1]
    return new / old


def update_M(mtable: MTable, turn: int, policy_after_turn, policy_at_iteration_start, batch: TreeBatch) -> MTable:
    """Multiply each trajectory's M by its turn ratio (after-turn over iteration-start)."""
    if policy_at_iteration_start is None or policy_after_turn is None:
        raise ValueError("both policy snapshots are required")
    if turn in mtable.processed:
        raise ValueError(f"turn {turn} was already folded into M")
    ratio = _turn_ratio(batch, turn, policy_after_turn, policy_at_iteration_start)
    return MTable(mtable.values * ratio, mtable.advantages, mtable.weights, turn, mtable.processed + [turn])


def suffix_ratio_check(mtable: MTable, batch: TreeBatch, policy_now, policy_start) -> float:
    """Max |M - A * P_now(processed turns) / P_start(processed turns)|, from whole-suffix probabilities."""
    if not mtable.processed:
        return float(np.max(np.abs(mtable.values - mtable.advantages)))
    cols = [t - 1 for t in mtable.processed]
    now = tree_step_probs(batch, policy_now)[:, cols].prod(axis=1)
    start = tree_step_probs(batch, policy_start)[:, cols].prod(axis=1)
    return float(np.max(np.abs(mtable.values - mtable.advantages * (now / start))))


def _pool_arrays(pool: TurnPool, policy: TabularSoftmaxPolicy, horizon: int):
    n = len(pool.samples)
    key_ids = np.full((n, horizon), -1, dtype=int)
    actions = np.zeros((n, horizon), dtype=int)
    for i, s in enumerate(pool.samples):
        if s.trajectory != i:
            raise ValueError("pool samples must be in trajectory order")
        if not s.is_placeholder:
            key_ids[i, pool.turn - 1] = policy.key_id(s.key)
        actions[i, pool.turn - 1] = s.action
    return key_ids, actions


def seeupo_turn_update(pool: TurnPool, mtable: MTable, policy: TabularSoftmaxPolicy,
                       policy_start: TabularSoftmaxPolicy, config: UpdateConfig,
                       optimizer: Optimizer | None = None, horizon: int | None = None) -> dict:
    """Optimize the turn-t clipped objective weighted by M; placeholder samples are masked."""
    if len(pool.samples) != len(mtable.values):
        raise ValueError("pool and M table are misaligned")
    T = horizon or max(pool.turn, 1)
    key_ids, actions = _pool_arrays(pool, policy, T)
    t = pool.turn - 1
    live = key_ids[:, t] >= 0
    old = np.ones_like(key_ids, dtype=float)
    start_probs = policy_start.probs_matrix()
    old[live, t] = start_probs[key_ids[live, t], actions[live, t]]
    optimizer = optimizer or Optimizer(policy, config)
    return clipped_ratio_update(policy, key_ids, actions, mtable.weights, mtable.values, old, [t], config,
                                optimizer, start_probs)


def _seeupo_step(batch: TreeBatch, policy, config, turns, optimizer, check_m: bool) -> tuple:
    start = policy.copy()
    start_probs = start.probs_matrix()
    old_step = tree_step_probs(batch, start)
    raw = grae_batch(batch)
    adv, _, _ = _normalize_joint(batch, raw, config.normalization)
    mt = init_M(batch, adv)
    w = batch.sample_weight()
    per_turn, m_err = {}, []
    if check_m:
        m_err.append(suffix_ratio_check(mt, batch, policy, start))
    grads = []
    for t in turns:
        mean_abs_m = float(np.sum(w * np.abs(mt.values)))
        stats = clipped_ratio_update(policy, batch.key_ids, batch.actions, w, mt.values, old_step, [t - 1],
                                     config, optimizer, start_probs)
        mt = update_M(mt, t, policy, start, batch)
        if check_m:
            m_err.append(suffix_ratio_check(mt, batch, policy, start))
        grads.append(stats["grad_norm"])
        per_turn[t] = {"clip_fraction": stats["clip_fraction"], "mean_abs_M": mean_abs_m}
    mu, sigma = batch_stats(adv, w)
    return {"grad_norm": float(np.sqrt(np.sum(np.square(grads)))),
            "clip_fraction": float(np.mean([v["clip_fraction"] for v in per_turn.values()])),
            "adv_mean": mu, "adv_std": sigma, "per_turn": per_turn, "m_errors": m_err, "M": mt}


def seeupo_iteration(env: TreeBanditSpec, policy: TabularSoftmaxPolicy, config: UpdateConfig, order: str = "reverse",
                     mode: str = "exact", seed: int = 0, iteration: int = 0, B: int = 8, G: int = 8,
                     source: BatchSource | None = None, optimizer: Optimizer | None = None,
                     check_m: bool = False) -> tuple:
    """One full iteration in place on ``policy``; returns (policy, report row)."""
    if not isinstance(env, TreeBanditSpec):
        raise TypeError("sequential turn updates need a TreeBanditSpec")
    source = source or BatchSource(env, policy, mode, B, G, seed)
    optimizer = optimizer or Optimizer(policy, config)
    turns = update_order(order, env.horizon, seed, iteration)
    batch = source.batch(policy, iteration)
    out = _seeupo_step(batch, policy, config, turns, optimizer, check_m)
    row = {"iteration": iteration + 1, "J_exact": source.exact_return(policy), "grad_norm": out["grad_norm"],
           "clip_fraction": out["clip_fraction"], "adv_mean": out["adv_mean"], "adv_std": out["adv_std"],
           "order": "-".join(str(t) for t in turns)}
    for t, v in out["per_turn"].items():
        row[f"clip_fraction_t{t}"] = v["clip_fraction"]
        row[f"mean_abs_M_t{t}"] = v["mean_abs_M"]
    if check_m:
        row["m_consistency_error"] = max(out["m_errors"])
    return policy, row


def run_seeupo(env: TreeBanditSpec, policy: TabularSoftmaxPolicy, config: UpdateConfig, iterations: int,
               order: str = "reverse", mode: str = "exact", seed: int = 0, B: int = 8, G: int = 8,
               j_star: float | None = None, check_m: bool = False, record_advantages: bool = False) -> ExperimentReport:
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    source = BatchSource(env, policy, mode, B, G, seed)
    optimizer = Optimizer(policy, config)
    extra = ["order"] + [c for t in range(1, env.horizon + 1) for c in (f"clip_fraction_t{t}", f"mean_abs_M_t{t}")]
    if check_m:
        extra.append("m_consistency_error")
    report = ExperimentReport({"algorithm": "SeeUPO", "order": order, "mode": mode, "iterations": iterations,
                               "seed": seed, "B": B, "G": G, **config.to_dict()}, j_star=j_star, extra_columns=extra)
    report.add_row({"iteration": 0, "J_exact": source.exact_return(policy)})
    for k in range(iterations):
        if record_advantages and k == 0:
            batch = source.batch(policy, 0)
            raw = grae_batch(batch)
            adv, mu, sigma = _normalize_joint(batch, raw, config.normalization)
            report.advantage_rows = _advantage_rows(batch, raw, adv, "GRAE", config.normalization, mu, sigma, False)
        _, row = seeupo_iteration(env, policy, config, order, mode, seed, k, B, G, source, optimizer, check_m)
        report.add_row(row)
    return report


def groups_to_batch(groups: list, policy: TabularSoftmaxPolicy) -> TreeBatch:
    """Array view of a list of ``Group`` objects (tree bandits)."""
    if not groups or not isinstance(groups[0], Group):
        raise ValueError("expected a nonempty list of groups")
    return tree_batch_from_groups(groups, policy)
