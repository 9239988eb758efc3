"""Policy updates: REINFORCE, the clipped proximal update, and the four baselines.

Gradients are accumulated into the padded (keys, width) logit layout with
``np.add.at``, which reduces in sample order, so results do not depend on
thread count.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .advantage import (batch_stats, exact_return, exact_values, gae_batch, grae_batch, group_stds,
                        make_records, normalize_batch_values, normalize_group_values)
from .envs import FiniteMdpSpec, TreeBanditSpec
from .policy import TabularSoftmaxPolicy
from .report import ExperimentReport
from .rng import derive_seed, make_rng
from .rollout import (MdpBatch, MdpLayout, TreeBatch, TreeLayout, mdp_step_probs, sample_mdp_batch,
                      sample_tree_batch, tree_step_probs)

ALGORITHMS = ("GAE-PPU", "GRAE-REINFORCE", "GRAE-PPU-token", "GRAE-PPU-seq")


@dataclass(frozen=True)
class UpdateConfig:
    learning_rate: float = 0.1
    clip_epsilon: float = 0.2
    epochs_per_batch: int = 1
    kl_penalty_coefficient: float = 0.0
    discount: float = 1.0
    gae_lambda: float = 1.0
    normalization: str = "none"  # none | batch | group
    estimator: str = "GRAE"  # GAE | GRAE | GRAE-LOO
    optimizer: str = "sgd"  # sgd | adam
    per_key_scaling: bool = False  # divide each key's gradient by its visitation weight
    value_noise: float = 0.0  # uniform critic error for GAE, 0 = exact critic

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be > 0")
        if self.epochs_per_batch < 1:
            raise ValueError("epochs_per_batch must be >= 1")
        if self.kl_penalty_coefficient < 0:
            raise ValueError("kl_penalty_coefficient must be >= 0")
        if not 0 <= self.discount <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("discount and gae_lambda must lie in [0, 1]")
        if self.normalization not in ("none", "batch", "group"):
            raise ValueError("normalization must be none, batch or group")
        if self.estimator not in ("GAE", "GRAE", "GRAE-LOO"):
            raise ValueError("estimator must be GAE, GRAE or GRAE-LOO")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ kernels


def accumulate_scores(policy: TabularSoftmaxPolicy, key_ids, actions, coeff, probs=None) -> np.ndarray:
    """Padded sum of coeff * (one-hot(action) - probs[key]); negative key ids are skipped."""
    probs = policy.probs_matrix() if probs is None else probs
    key_ids, actions, coeff = np.ravel(key_ids), np.ravel(actions), np.ravel(coeff)
    live = key_ids >= 0
    k, a, c = key_ids[live], actions[live], coeff[live]
    g = np.zeros_like(policy.logits)
    np.add.at(g, (k, a), c)
    np.add.at(g, k, -c[:, None] * probs[k])
    return g


def clipped_terms(ratio, adv, eps: float) -> tuple:
    """Per-sample min(r A, clip(r) A) and the mask where the unclipped branch is the min."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.minimum(unclipped, clipped), unclipped <= clipped


def kl_gradient(policy: TabularSoftmaxPolicy, old_probs: np.ndarray, visits: np.ndarray) -> np.ndarray:
    """Gradient of -sum_k visits[k] * KL(old_k || new_k) in logits."""
    return -visits[:, None] * (policy.probs_matrix() - old_probs)


def visit_weights(policy: TabularSoftmaxPolicy, key_ids, weights) -> np.ndarray:
    key_ids = np.ravel(key_ids)
    live = key_ids >= 0
    return np.bincount(key_ids[live], weights=np.ravel(weights)[live], minlength=len(policy.keys))


def _scale_by_visits(g: np.ndarray, visits: np.ndarray) -> np.ndarray:
    """Per-key preconditioner: divide each row by the key's visitation weight (rows never visited stay 0)."""
    scale = np.where(visits > 0, 1.0 / np.where(visits > 0, visits, 1.0), 0.0)
    return g * scale[:, None]


class Optimizer:
    """Plain gradient ascent, or Adam behind a flag."""

    def __init__(self, policy: TabularSoftmaxPolicy, config: UpdateConfig):
        self.config = config
        self.m = np.zeros_like(policy.logits)
        self.v = np.zeros_like(policy.logits)
        self.t = 0

    def step(self, policy: TabularSoftmaxPolicy, grad: np.ndarray) -> None:
        lr = self.config.learning_rate
        if self.config.optimizer == "sgd":
            policy.add_to_logits(lr * grad)
            return
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad ** 2
        m_hat = self.m / (1 - 0.9 ** self.t)
        v_hat = self.v / (1 - 0.999 ** self.t)
        policy.add_to_logits(lr * m_hat / (np.sqrt(v_hat) + 1e-8))


# --------------------------------------------------------- batch-level ops


def _step_view(batch, policy):
    """(key_ids, actions, per-step probs) for a tree or MDP batch, each (N, T)."""
    if isinstance(batch, TreeBatch):
        return batch.key_ids, batch.actions, tree_step_probs(batch, policy)
    return batch.states, batch.actions, mdp_step_probs(batch, policy)


def reinforce_gradient(batch, advantages, policy: TabularSoftmaxPolicy) -> np.ndarray:
    """Flat sum over samples of weight * A * grad log pi; joint advantages are broadcast to steps."""
    key_ids, actions, _ = _step_view(batch, policy)
    adv = np.asarray(advantages, dtype=float)
    if adv.ndim == 1:
        if adv.shape[0] != batch.n:
            raise ValueError("advantages misaligned with batch")
        adv = np.repeat(adv[:, None], key_ids.shape[1], axis=1)
    if adv.shape != key_ids.shape:
        raise ValueError("advantages misaligned with batch")
    coeff = batch.sample_weight()[:, None] * adv
    return policy.flatten(accumulate_scores(policy, key_ids, actions, coeff))


def _ratios(batch, adv, policy_candidate, policy_old):
    key_ids, actions, p_new = _step_view(batch, policy_candidate)
    _, _, p_old = _step_view(batch, policy_old)
    step_ratio = p_new / p_old
    if adv.ndim == 1:  # sequence level: one ratio per trajectory
        if adv.shape[0] != batch.n:
            raise ValueError("advantages misaligned with batch")
        ratio = np.ones(batch.n)
        for t in range(step_ratio.shape[1]):
            ratio = ratio * step_ratio[:, t]
        return key_ids, actions, ratio, step_ratio
    if adv.shape != key_ids.shape:
        raise ValueError("advantages misaligned with batch")
    return key_ids, actions, step_ratio, step_ratio


def ppu_objective(batch, advantages, policy_candidate, policy_old, eps: float) -> float:
    """Weighted mean of min(r A, clip(r, 1-eps, 1+eps) A).

    A 1-D advantage array means sequence-level ratios (product over turns);
    a 2-D array means one ratio per step.
    """
    adv = np.asarray(advantages, dtype=float)
    key_ids, _, ratio, _ = _ratios(batch, adv, policy_candidate, policy_old)
    vals, _ = clipped_terms(ratio, adv, eps)
    w = batch.sample_weight()
    if adv.ndim == 1:
        return float(np.sum(w * vals))
    return float(np.sum(w[:, None] * vals * (key_ids >= 0)))  # placeholder steps carry no term


def ppu_gradient(batch, advantages, policy_candidate, policy_old, eps: float) -> np.ndarray:
    """Flat gradient of ``ppu_objective`` in the candidate's logits; clipped samples contribute 0."""
    adv = np.asarray(advantages, dtype=float)
    key_ids, actions, ratio, _ = _ratios(batch, adv, policy_candidate, policy_old)
    _, active = clipped_terms(ratio, adv, eps)
    w = batch.sample_weight()
    if adv.ndim == 1:
        coeff = np.repeat((w * adv * ratio * active)[:, None], key_ids.shape[1], axis=1)
    else:
        coeff = w[:, None] * adv * ratio * active
    return policy_candidate.flatten(accumulate_scores(policy_candidate, key_ids, actions, coeff))


def clipped_ratio_update(policy, key_ids, actions, sample_w, adv, old_step_probs, turns, config,
                         optimizer, old_probs_matrix) -> dict:
    """Shared epoch loop for sequence-ratio clipped updates.

    The ratio of each trajectory is the product over ``turns`` of
    pi(a^t)/pi_old(a^t); gradients land only on the keys of those turns.
    Placeholder turns (key id -1) have ratio 1 and no gradient.
    """
    eps = config.clip_epsilon
    live = key_ids[:, turns] >= 0
    stats = {"grad_norm": 0.0, "clip_fraction": 0.0}
    for epoch in range(config.epochs_per_batch):
        probs = policy.probs_matrix()
        ratio = np.ones(len(sample_w))
        for t in turns:
            lt = key_ids[:, t] >= 0
            p = np.where(lt, probs[np.where(lt, key_ids[:, t], 0), actions[:, t]], 1.0)
            ratio = ratio * (p / old_step_probs[:, t])
        _, active = clipped_terms(ratio, adv, eps)
        coeff = sample_w * adv * ratio * active
        g = np.zeros_like(policy.logits)
        for t in turns:
            g += accumulate_scores(policy, key_ids[:, t], actions[:, t], coeff, probs)
        if config.kl_penalty_coefficient > 0:
            visits = visit_weights(policy, key_ids[:, turns], np.repeat(sample_w[:, None], len(turns), axis=1))
            g += config.kl_penalty_coefficient * kl_gradient(policy, old_probs_matrix, visits)
        if config.per_key_scaling:
            g = _scale_by_visits(g, visit_weights(policy, key_ids[:, turns],
                                                  np.repeat(sample_w[:, None], len(turns), axis=1)))
        if epoch == 0:
            stats["grad_norm"] = float(np.linalg.norm(policy.flatten(g)))
        considered = live.any(axis=1)
        tot = float(np.sum(sample_w[considered]))
        stats["clip_fraction"] = float(np.sum(sample_w[considered & ~active]) / tot) if tot > 0 else 0.0
        optimizer.step(policy, g)
    return stats


def _token_update(policy, key_ids, actions, sample_w, adv, old_step_probs, config, optimizer, old_probs) -> dict:
    """Epoch loop for per-step ratios (token-level clipped update)."""
    eps = config.clip_epsilon
    live = key_ids >= 0
    w2 = np.where(live, sample_w[:, None], 0.0)
    stats = {"grad_norm": 0.0, "clip_fraction": 0.0}
    for epoch in range(config.epochs_per_batch):
        probs = policy.probs_matrix()
        p = np.where(live, probs[np.where(live, key_ids, 0), actions], 1.0)
        ratio = p / old_step_probs
        _, active = clipped_terms(ratio, adv, eps)
        g = accumulate_scores(policy, key_ids, actions, w2 * adv * ratio * active, probs)
        if config.kl_penalty_coefficient > 0:
            g += config.kl_penalty_coefficient * kl_gradient(policy, old_probs, visit_weights(policy, key_ids, w2))
        if config.per_key_scaling:
            g = _scale_by_visits(g, visit_weights(policy, key_ids, w2))
        if epoch == 0:
            stats["grad_norm"] = float(np.linalg.norm(policy.flatten(g)))
        tot = float(w2.sum())
        stats["clip_fraction"] = float(np.sum(w2 * ~active) / tot) if tot > 0 else 0.0
        optimizer.step(policy, g)
    return stats


# -------------------------------------------------------------- algorithms


def _check_combination(name, env):
    if name not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    if name == "GAE-PPU" and not isinstance(env, FiniteMdpSpec):
        raise ValueError("GAE-PPU needs a FiniteMdpSpec (values over states)")
    if name == "GRAE-PPU-seq" and not isinstance(env, TreeBanditSpec):
        raise ValueError("GRAE-PPU-seq needs a TreeBanditSpec (sequence-level ratios)")
    if not isinstance(env, (FiniteMdpSpec, TreeBanditSpec)):
        raise TypeError("env must be a TreeBanditSpec or FiniteMdpSpec")


def _normalize_joint(batch, adv, mode):
    """Normalize one advantage per trajectory; returns (values, batch_mean, batch_std)."""
    w = batch.sample_weight()
    if mode == "batch":
        out, mu, sigma, _ = normalize_batch_values(adv, w)
        return out, mu, sigma
    if mode == "group":
        out, _ = normalize_group_values(adv, batch.group, group_stds(batch))
        return out, float("nan"), float("nan")
    return adv, float("nan"), float("nan")


def _normalize_steps(batch, adv, mode):
    if mode == "group":
        raise ValueError("group normalization applies to joint (per-trajectory) advantages")
    if mode == "batch":
        w = np.repeat(batch.sample_weight()[:, None], adv.shape[1], axis=1)
        out, mu, sigma, _ = normalize_batch_values(adv, w)
        return out, mu, sigma
    return adv, float("nan"), float("nan")


def _perturbed_values(vt, config, seed, k):
    v = vt.v.copy()
    if config.value_noise > 0:
        rng = make_rng(seed, "value_noise", k)
        v[:, :-1] += rng.uniform(-config.value_noise, config.value_noise, size=v[:, :-1].shape)
    return v


def _advantage_rows(batch, raw, normalized, estimator, mode, mu, sigma, turn_level):
    w = batch.sample_weight()
    stds = group_stds(batch)
    rows = []
    if turn_level:
        for i in range(raw.shape[0]):
            for t in range(raw.shape[1]):
                rows.append({"trajectory": i, "turn": t + 1, "estimator": estimator, "raw": float(raw[i, t]),
                             "normalized": float(normalized[i, t]), "normalization": mode,
                             "group_std": float(stds[batch.group[i]]), "batch_mean": mu, "batch_std": sigma})
    else:
        for rec, x in zip(make_records(raw, estimator, w, batch.group, stds), normalized):
            rows.append({"trajectory": rec.trajectory, "turn": 0, "estimator": estimator, "raw": rec.raw,
                         "normalized": float(x), "normalization": mode, "group_std": rec.group_std,
                         "batch_mean": mu, "batch_std": sigma})
    return rows


class BatchSource:
    """Exact enumeration (layout built once) or seeded Monte Carlo batches."""

    def __init__(self, env, policy, mode: str, B: int, G: int, seed: int):
        if mode not in ("exact", "sampled"):
            raise ValueError("mode must be exact or sampled")
        self.env, self.mode, self.B, self.G, self.seed = env, mode, B, G, seed
        self.tree_layout = TreeLayout(env, policy) if isinstance(env, TreeBanditSpec) else None
        self.layout = None
        if mode == "exact":
            self.layout = self.tree_layout if self.tree_layout is not None else MdpLayout(env)

    def exact_return(self, policy) -> float:
        """Exact J; tree bandits reuse the enumerated layout instead of the recursive oracle."""
        if self.tree_layout is not None:
            b = self.tree_layout.batch(policy)
            return float(np.sum(b.sample_weight() * b.reward))
        return exact_return(self.env, policy)

    def batch(self, policy, k: int):
        if self.layout is not None:
            return self.layout.batch(policy)
        s = derive_seed(self.seed, "batch", k)
        if isinstance(self.env, TreeBanditSpec):
            return sample_tree_batch(self.env, policy, self.B, self.G, s)[0]
        return sample_mdp_batch(self.env, policy, self.B, self.G, s)


def run_algorithm(name: str, env, policy: TabularSoftmaxPolicy, config: UpdateConfig, iterations: int,
                  seed: int = 0, mode: str = "exact", B: int = 8, G: int = 8, j_star: float | None = None,
                  record_advantages: bool = False) -> ExperimentReport:
    """Run one of the baseline algorithms in place on ``policy`` and report exact J per iteration."""
    _check_combination(name, env)
    source = BatchSource(env, policy, mode, B, G, seed)
    optimizer = Optimizer(policy, config)
    report = ExperimentReport({"algorithm": name, "mode": mode, "iterations": iterations, "seed": seed,
                               "B": B, "G": G, **config.to_dict()}, j_star=j_star)
    report.add_row({"iteration": 0, "J_exact": source.exact_return(policy)})
    loo = config.estimator == "GRAE-LOO"
    for k in range(iterations):
        batch = source.batch(policy, k)
        key_ids, actions, old_step = _step_view(batch, policy)
        old_probs = policy.probs_matrix()
        w = batch.sample_weight()
        if name == "GAE-PPU":
            values = _perturbed_values(exact_values(env, policy, config.discount), config, seed, k)
            raw = gae_batch(batch, values, config.discount, config.gae_lambda)
            adv, mu, sigma = _normalize_steps(batch, raw, config.normalization)
            stats = _token_update(policy, key_ids, actions, w, adv, old_step, config, optimizer, old_probs)
            turn_level = True
        else:
            raw = grae_batch(batch, leave_one_out=loo)
            joint, mu, sigma = _normalize_joint(batch, raw, config.normalization)
            if name == "GRAE-REINFORCE":
                g = reinforce_gradient(batch, joint, policy)
                stats = {"grad_norm": float(np.linalg.norm(g)), "clip_fraction": 0.0}
                optimizer.step(policy, policy.unflatten(g))
                adv = joint
                turn_level = False
            elif name == "GRAE-PPU-token":
                adv = np.repeat(joint[:, None], key_ids.shape[1], axis=1)
                stats = _token_update(policy, key_ids, actions, w, adv, old_step, config, optimizer, old_probs)
                raw = np.repeat(raw[:, None], key_ids.shape[1], axis=1)
                turn_level = True
            else:
                adv = joint
                stats = clipped_ratio_update(policy, key_ids, actions, w, joint, old_step,
                                             list(range(key_ids.shape[1])), config, optimizer, old_probs)
                turn_level = False
        a_mu, a_sigma = batch_stats(adv, np.broadcast_to(w[:, None], adv.shape) if adv.ndim == 2 else w)
        report.add_row({"iteration": k + 1, "J_exact": source.exact_return(policy), "grad_norm": stats["grad_norm"],
                        "clip_fraction": stats["clip_fraction"], "adv_mean": a_mu, "adv_std": a_sigma})
        if record_advantages and k == 0:
            report.advantage_rows = _advantage_rows(batch, raw, adv, "GAE" if name == "GAE-PPU" else config.estimator,
                                                    config.normalization, mu, sigma, turn_level)
    return report
