"""Executable checks: optimal-value oracles, drift functionals, gradient and bias harnesses."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .advantage import exact_return, exact_values, grae_batch
from .envs import (DEGRADATION_BAD, DEGRADATION_REFERENCE_LOGITS, FiniteMdpSpec, NOOP_ACTION, TreeBanditSpec,
                   build_degradation_mdp)
from .policy import HistoryKey, StateKey, TabularSoftmaxPolicy
from .rng import make_rng
from .rollout import MdpBatch, MdpLayout
from .updates import Optimizer, UpdateConfig, _token_update, reinforce_gradient

BRUTE_FORCE_CAP = 1_000_000
FD_STEP = 1e-5


# ------------------------------------------------------------ optimal values


@dataclass
class OptimalValueTree:
    v_star: dict  # (s0, prefix) -> V*
    argmax_actions: dict  # (s0, prefix) -> tuple of maximizing actions
    j_star: float

    def optimal_path(self, s0: int) -> tuple:
        path = ()
        while (s0, path) in self.argmax_actions:
            path = path + (self.argmax_actions[(s0, path)][0],)
        return path


def backward_induction(spec: TreeBanditSpec) -> OptimalValueTree:
    """V*(prefix) = max over the next action of V*(prefix + a), from the last turn backward."""
    v, arg = {}, {}
    T = spec.horizon
    for s0 in range(spec.num_initial_states):
        for t in range(T, -1, -1):
            for prefix in itertools.product(*(range(n) for n in spec.actions_per_turn[:t])):
                k = spec.ended_after(s0, prefix)
                if k is not None and k < t:
                    continue
                if t == T or k == t:
                    padded = prefix + (NOOP_ACTION,) * (T - t)
                    v[(s0, prefix)] = float(spec.reward_table[s0, spec.path_index(padded)])
                    continue
                children = [v[(s0, prefix + (a,))] for a in range(spec.actions_per_turn[t])]
                best = max(children)
                v[(s0, prefix)] = best
                arg[(s0, prefix)] = tuple(a for a, c in enumerate(children) if c == best)
    j = 0.0
    for s0 in range(spec.num_initial_states):
        j += float(spec.initial_distribution[s0]) * v[(s0, ())]
    return OptimalValueTree(v, arg, j)


def _decision_nodes(spec: TreeBanditSpec, s0: int) -> list:
    nodes = []
    for t in range(spec.horizon):
        for prefix in itertools.product(*(range(n) for n in spec.actions_per_turn[:t])):
            if spec.is_decision_point(s0, prefix):
                nodes.append(tuple(prefix))
    return nodes


def count_deterministic_policies(spec: TreeBanditSpec) -> int:
    total = 0
    for s0 in range(spec.num_initial_states):
        n = 1
        for prefix in _decision_nodes(spec, s0):
            n *= spec.actions_per_turn[len(prefix)]
        total += n
    return total


def brute_force_optimal(spec: TreeBanditSpec, cap: int = BRUTE_FORCE_CAP) -> tuple:
    """Exhaustive search over deterministic history-conditioned policies.

    Initial states do not interact, so each one is searched separately and
    the count that must stay under ``cap`` is the sum over initial states.
    Returns (J*, {HistoryKey: action}) for the first maximizer found.
    """
    if count_deterministic_policies(spec) > cap:
        raise ValueError("too many deterministic policies for brute force")
    best_policy = {}
    j = 0.0
    for s0 in range(spec.num_initial_states):
        nodes = _decision_nodes(spec, s0)
        node_index = {p: i for i, p in enumerate(nodes)}
        best_val, best_choice = None, None
        for choice in itertools.product(*(range(spec.actions_per_turn[len(p)]) for p in nodes)):
            path = ()
            while path in node_index:
                path = path + (choice[node_index[path]],)
            path = path + (NOOP_ACTION,) * (spec.horizon - len(path))
            val = float(spec.reward_table[s0, spec.path_index(path)])
            if best_val is None or val > best_val:
                best_val, best_choice = val, choice
        for p, a in zip(nodes, best_choice):
            best_policy[HistoryKey(s0, p, len(p) + 1)] = int(a)
        j += float(spec.initial_distribution[s0]) * best_val
    return j, best_policy


# -------------------------------------------------------------------- drifts


def _ratios(pi_old, pi_cand):
    pi_old = np.asarray(pi_old, dtype=float)
    pi_cand = np.asarray(pi_cand, dtype=float)
    if pi_old.shape != pi_cand.shape or np.any(pi_old <= 0):
        raise ValueError("probability vectors must match and the old one must have full support")
    return pi_old, pi_cand / pi_old


def ppu_drift(pi_old, pi_candidate, advantages, eps: float) -> float:
    """E_old[ReLU((r - clip(r, 1-eps, 1+eps)) * A)] at one state."""
    pi_old, r = _ratios(pi_old, pi_candidate)
    a = np.asarray(advantages, dtype=float)
    return float(np.dot(pi_old, np.maximum((r - np.clip(r, 1 - eps, 1 + eps)) * a, 0.0)))


def grae_ppu_drift(pi_old, pi_candidate, advantages, delta: float, eps: float) -> float:
    """Drift induced by advantages shifted by a state constant ``delta``."""
    pi_old, r = _ratios(pi_old, pi_candidate)
    a = np.asarray(advantages, dtype=float) + delta
    return float(np.dot(pi_old, np.maximum((r - np.clip(r, 1 - eps, 1 + eps)) * a, 0.0))) - delta


def gspo_drift(pi_old, pi_candidate, advantages, group_std: float, eps: float) -> float:
    """E_old[r A - min(r A / std, clip(r) A / std)] at one state."""
    if group_std <= 0:
        raise ValueError("group std must be positive")
    pi_old, r = _ratios(pi_old, pi_candidate)
    a = np.asarray(advantages, dtype=float)
    inner = np.minimum(r * a / group_std, np.clip(r, 1 - eps, 1 + eps) * a / group_std)
    return float(np.dot(pi_old, r * a - inner))


def _drift_fn(kind: str, delta: float, group_std: float):
    if kind == "PPU":
        return lambda po, pc, a, e: ppu_drift(po, pc, a, e)
    if kind == "GRAE-PPU":
        return lambda po, pc, a, e: grae_ppu_drift(po, pc, a, delta, e)
    if kind == "GSPO":
        return lambda po, pc, a, e: gspo_drift(po, pc, a, group_std, e)
    raise ValueError("kind must be PPU, GRAE-PPU or GSPO")


def simplex_fd_gradient(f, p: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of f along an orthonormal basis of the simplex's tangent space."""
    n = len(p)
    basis = np.linalg.qr(np.eye(n) - 1.0 / n)[0][:, : n - 1]
    return np.array([(f(p + h * basis[:, i]) - f(p - h * basis[:, i])) / (2 * h) for i in range(n - 1)])


@dataclass
class DriftEvaluation:
    kind: str
    state: dict
    value: float
    origin_value: float
    origin_grad_norm: float


def evaluate_drift(kind, pi_old, pi_candidate, advantages, eps=0.2, delta=0.0, group_std=1.0) -> DriftEvaluation:
    f = _drift_fn(kind, delta, group_std)
    pi_old = np.asarray(pi_old, dtype=float)
    grad = simplex_fd_gradient(lambda p: f(pi_old, p, advantages, eps), pi_old)
    return DriftEvaluation(kind, {"pi_old": list(map(float, pi_old)), "advantages": list(map(float, advantages))},
                           f(pi_old, pi_candidate, advantages, eps), f(pi_old, pi_old, advantages, eps),
                           float(np.linalg.norm(grad)))


@dataclass
class DriftPropertyReport:
    kind: str
    draws: int
    violations: int
    min_value: float
    witness: dict | None
    origin_value: float
    origin_grad_norm: float
    analytic_witness: bool = False
    parameters: dict = field(default_factory=dict)


def _random_state(rng, eps):
    n = int(rng.integers(2, 6))
    pi_old = rng.dirichlet(np.ones(n))
    pi_old = np.maximum(pi_old, 1e-3)
    pi_old /= pi_old.sum()
    a = rng.normal(0, 1, n)
    a -= np.dot(pi_old, a)  # true advantages average to zero under the old policy
    if rng.random() < 0.5:
        cand = rng.dirichlet(np.ones(n))
    else:  # stay near the old policy so the unclipped band gets visited
        cand = pi_old * np.exp(rng.normal(0, eps, n))
        cand /= cand.sum()
    return pi_old, cand, a


def _analytic_gspo_witness(group_std: float, eps: float):
    """Two actions, A = (+1, -1): push toward the positive action if std < 1, away from it if std > 1."""
    pi_old = np.array([0.5, 0.5])
    a = np.array([1.0, -1.0])
    shift = 0.5 * eps * 0.5
    cand = np.array([0.5 + shift, 0.5 - shift]) if group_std < 1 else np.array([0.5 - shift, 0.5 + shift])
    return pi_old, cand, a


def check_drift_properties(kind: str, search_budget: int = 10_000, seed: int = 0, eps: float = 0.2,
                           delta: float = 10.0, group_std: float = 2.0) -> DriftPropertyReport:
    """Randomized search for negative drift plus the value and gradient at the origin."""
    if search_budget < 1:
        raise ValueError("budget must be >= 1")
    f = _drift_fn(kind, delta, group_std)
    rng = make_rng(seed, f"drift_{kind}")
    violations, min_val, witness = 0, np.inf, None
    for _ in range(search_budget):
        po, pc, a = _random_state(rng, eps)
        val = f(po, pc, a, eps)
        if val < min_val:
            min_val = val
        if val < 0 and (witness is None or val < witness["value"]):
            witness = {"pi_old": po.tolist(), "pi_candidate": pc.tolist(), "advantages": a.tolist(), "value": val}
        violations += val < 0
    analytic = False
    if kind == "GSPO" and witness is None and group_std != 1.0:
        po, pc, a = _analytic_gspo_witness(group_std, eps)
        val = f(po, pc, a, eps)
        witness = {"pi_old": po.tolist(), "pi_candidate": pc.tolist(), "advantages": a.tolist(), "value": val}
        analytic = True
    po = np.array([0.3, 0.5, 0.2])
    a = np.array([1.0, -0.2, -1.0])
    a -= np.dot(po, a)
    origin = f(po, po, a, eps)
    grad = simplex_fd_gradient(lambda p: f(po, p, a, eps), po)
    if kind == "GRAE-PPU" and witness is None and origin < 0:
        witness = {"pi_old": po.tolist(), "pi_candidate": po.tolist(), "advantages": a.tolist(), "value": origin}
    return DriftPropertyReport(kind, search_budget, int(violations), float(min_val), witness, float(origin),
                               float(np.linalg.norm(grad)), analytic,
                               {"eps": eps, "delta": delta, "group_std": group_std})


# ------------------------------------------------------- gradient harness


def exact_return_gradient(env, policy: TabularSoftmaxPolicy, discount: float | None = None,
                          h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of the exact return in the flat logits."""
    base = policy.get_flat()
    probe = policy.copy()
    grad = np.zeros_like(base)

    def j_at(x):
        probe.set_flat(x)
        vt = exact_values(env, probe, discount)
        return float(np.dot(env.initial_distribution, vt.v[:, 0])) if vt.kind == "mdp" else exact_return(env, probe)

    for i in range(len(base)):
        e = np.zeros_like(base)
        e[i] = h
        grad[i] = (j_at(base + e) - j_at(base - e)) / (2 * h)
    return grad


def grae_policy_gradient(spec: FiniteMdpSpec, policy: TabularSoftmaxPolicy) -> np.ndarray:
    """Exact E[sum_t grad log pi(a_t|s_t) * (R - V(s_0))] with R the undiscounted total return."""
    batch = MdpLayout(spec).batch(policy)
    return reinforce_gradient(batch, grae_batch(batch), policy)


def verify_grae_gradient(env: FiniteMdpSpec, policy: TabularSoftmaxPolicy, gamma: float) -> tuple:
    """(GRAE gradient, gradient of the gamma-discounted return, gap norm); both exact."""
    grae = grae_policy_gradient(env, policy)
    true = exact_return_gradient(env.with_discount(gamma), policy)
    return grae, true, float(np.linalg.norm(grae - true))


def discounted_witness_mdp() -> FiniteMdpSpec:
    """Three-step MDP where the first action trades an immediate reward for a delayed larger one.

    From the start, action 0 pays 1 now and action 1 pays 1.2 two steps
    later. Undiscounted, action 1 is better; at gamma=0.9 it is worth
    0.972 < 1, so the total-return gradient and the discounted gradient
    disagree in sign at the start state.
    """
    P = np.zeros((4, 2, 4))
    P[0, 0, 1] = 1.0
    P[0, 1, 2] = 1.0
    P[1, :, 1] = 1.0
    P[2, :, 3] = 1.0
    P[3, :, 1] = 1.0
    R = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.2, 1.2]])
    return FiniteMdpSpec(4, 2, P, R, 3, 0.9, np.array([1.0, 0.0, 0.0, 0.0]))


# --------------------------------------------------------- degradation run


@dataclass
class DegradationReport:
    values: dict
    true_advantages: list
    grae_advantages: list
    ratio_bad_grae: float
    ratio_bad_true: float
    prob_bad_before: float
    prob_bad_after_grae: float
    prob_bad_after_true: float
    J_before: float
    J_after_grae: float
    J_after_true: float
    slope_sign_true: float
    slope_sign_grae: float
    epochs: int
    full_batch: dict


def degradation_reference_policy(spec: FiniteMdpSpec | None = None) -> TabularSoftmaxPolicy:
    spec = spec or build_degradation_mdp()
    pol = TabularSoftmaxPolicy.for_mdp(spec)
    pol.set_flat(DEGRADATION_REFERENCE_LOGITS.ravel())
    return pol


def _single_path_batch(spec: FiniteMdpSpec, states, actions) -> MdpBatch:
    states = np.array([states], dtype=int)
    actions = np.array([actions], dtype=int)
    return MdpBatch(states, actions, spec.reward[states, actions], np.ones(1), np.zeros(1, dtype=int),
                    np.ones(1), states[:, 0].copy(), False)


def reproduce_degradation(eps: float = 0.2, learning_rate: float = 1e-4, epochs: int = 3000) -> DegradationReport:
    """Clipped token-level updates on the sample that plays the bad action at the high-value state.

    The clipped objective of a single sample is the per-action objective,
    so the ratio of the bad action is pushed to the upper clip bound by the
    shifted (group-relative) advantage +5 and to the lower bound by the true
    advantage -5. The full-batch exact run is reported for comparison.
    """
    spec = build_degradation_mdp()
    ref = degradation_reference_policy(spec)
    vt = exact_values(spec, ref)
    adv = vt.advantage()
    v0 = float(vt.v[0, 0])
    path_s, path_a = [0, 1], [0, DEGRADATION_BAD]
    batch = _single_path_batch(spec, path_s, path_a)
    total = float(batch.rewards.sum())
    grae_adv = np.full((1, 2), total - v0)
    true_adv = np.array([[adv[0, 0, 0], adv[1, DEGRADATION_BAD, 1]]])
    config = UpdateConfig(learning_rate=learning_rate, clip_epsilon=eps, epochs_per_batch=epochs)
    old_probs = ref.probs_matrix()
    old_step = old_probs[batch.states, batch.actions]
    results = {}
    for name, a in (("grae", grae_adv), ("true", true_adv)):
        pol = ref.copy()
        _token_update(pol, batch.states, batch.actions, batch.sample_weight(), a, old_step, config,
                      Optimizer(pol, config), old_probs)
        results[name] = pol
    s1 = ref.key_id(StateKey(1))
    p_bad = float(old_probs[s1, DEGRADATION_BAD])

    def ratio(pol):
        return float(pol.probs_matrix()[s1, DEGRADATION_BAD] / p_bad)

    def slope(a):  # d/dr of min(r a, clip(r) a) at r = 1
        return float(np.sign(a))

    layout_batch = MdpLayout(spec).batch(ref)
    full_adv = np.repeat(grae_batch(layout_batch)[:, None], 2, axis=1)
    full = ref.copy()
    _token_update(full, layout_batch.states, layout_batch.actions, layout_batch.sample_weight(), full_adv,
                  old_probs[layout_batch.states, layout_batch.actions], config, Optimizer(full, config), old_probs)
    return DegradationReport(
        values={"V_s0": v0, "V_s1": float(vt.v[1, 1]), "Delta_s1": float(vt.v[1, 1] - v0)},
        true_advantages=[float(adv[1, 0, 1]), float(adv[1, 1, 1])],
        grae_advantages=[float(vt.q[1, 0, 1] - v0), float(vt.q[1, 1, 1] - v0)],
        ratio_bad_grae=ratio(results["grae"]), ratio_bad_true=ratio(results["true"]),
        prob_bad_before=p_bad, prob_bad_after_grae=float(results["grae"].probs_matrix()[s1, DEGRADATION_BAD]),
        prob_bad_after_true=float(results["true"].probs_matrix()[s1, DEGRADATION_BAD]),
        J_before=exact_return(spec, ref), J_after_grae=exact_return(spec, results["grae"]),
        J_after_true=exact_return(spec, results["true"]),
        slope_sign_true=slope(true_adv[0, 1]), slope_sign_grae=slope(grae_adv[0, 1]), epochs=epochs,
        full_batch={"ratio_bad": ratio(full), "J_after": exact_return(spec, full)},
    )
