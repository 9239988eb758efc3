"""Seeded instance suites and the numbered checks run by ``verify`` and the acceptance tests.

Each check returns a ``CheckResult`` whose ``details`` hold only
deterministic numbers, so scorecards are byte-stable across runs.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .advantage import (exact_values, gae_bias_bound, gae_expected, grae_batch, grae_conditional_bias)
from .envs import MdpShape, SpecError, TreeBanditShape, build_degradation_mdp, generate_finite_mdp, generate_tree_bandit
from .policy import TabularSoftmaxPolicy
from .rng import derive_seed, make_rng
from .rollout import TreeLayout
from .seeupo import run_seeupo, seeupo_iteration
from .theory import (backward_induction, brute_force_optimal, check_drift_properties, count_deterministic_policies,
                     degradation_reference_policy, discounted_witness_mdp, grae_ppu_drift, ppu_drift,
                     reproduce_degradation, simplex_fd_gradient, verify_grae_gradient)
from .updates import BatchSource, Optimizer, UpdateConfig, run_algorithm

SUITE_SEED = 20240917
SEEUPO_SUITE_POLICY_CAP = 20_000

# Step size used for every monotonicity and optimality check. The gradient
# of each key is divided by that key's visitation probability, so the step
# no longer shrinks at rarely visited histories.
SEEUPO_CONFIG = UpdateConfig(learning_rate=20.0, clip_epsilon=0.2, epochs_per_batch=1, per_key_scaling=True)
SEEUPO_ITERATIONS = 500

GAE_GAMMAS = (0.5, 0.9, 0.99)
GAE_LAMBDAS = (0.0, 0.5, 0.95)
GAE_EPS = (0.01, 0.1)


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.criterion:2d} {self.name:<18s} {'PASS' if self.passed else 'FAIL'}"

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "name": self.name, "passed": self.passed, "details": self.details}


# ------------------------------------------------------------------ suites


def mdp_suite(n: int = 50, seed: int = SUITE_SEED) -> list:
    shape = MdpShape(num_states=(2, 5), num_actions=(2, 3), horizon=(1, 4))
    return [generate_finite_mdp(derive_seed(seed, "mdp_suite", i), shape) for i in range(n)]


def bandit_suite(n: int = 50, seed: int = SUITE_SEED) -> list:
    out = []
    for i in range(n):
        shape = TreeBanditShape(num_states=(1, 3), horizon=(1, 3), actions=(2, 3), reward_range=(-1.0, 1.0),
                                random_initial_distribution=i % 2 == 1, early_stop_prob=0.2 if i % 3 == 0 else 0.0)
        out.append(generate_tree_bandit(derive_seed(seed, "bandit_suite", i), shape))
    return out


def seeupo_suite(n: int = 20, seed: int = SUITE_SEED) -> list:
    """Tree bandits with T in {2, 3}, up to 4 actions per turn and 3 initial states.

    Draws are redrawn (next index) until brute force stays cheap; a third
    of the instances end some histories early.
    """
    out, k = [], 0
    while len(out) < n:
        i = len(out)
        shape = TreeBanditShape(num_states=(1, 3), horizon=2 + i % 2, actions=(2, 4),
                                random_initial_distribution=i % 4 == 1, early_stop_prob=0.25 if i % 3 == 2 else 0.0)
        spec = generate_tree_bandit(derive_seed(seed, "seeupo_suite", k), shape)
        k += 1
        if count_deterministic_policies(spec) <= SEEUPO_SUITE_POLICY_CAP:
            out.append(spec)
    return out


def random_policy(env, seed: int, scale: float = 1.0) -> TabularSoftmaxPolicy:
    if hasattr(env, "reward_table"):
        return TabularSoftmaxPolicy.for_tree_bandit(env, init="gaussian", scale=scale, seed=seed)
    return TabularSoftmaxPolicy.for_mdp(env, init="gaussian", scale=scale, seed=seed)


def _timed(criterion, name, fn) -> CheckResult:
    t0 = time.perf_counter()
    passed, details = fn()
    return CheckResult(criterion, name, bool(passed), details, time.perf_counter() - t0)


# ---------------------------------------------------------------- criteria


def check_gae_unbiased() -> CheckResult:
    """Exact-expectation GAE with the true values equals the DP advantage."""
    def run():
        worst = 0.0
        for i, spec in enumerate(mdp_suite()):
            pol = random_policy(spec, i)
            for gamma in (1.0, 0.9):
                s = spec.with_discount(gamma)
                vt = exact_values(s, pol)
                adv = vt.advantage()
                for lam in (0.0, 0.5, 1.0):
                    worst = max(worst, float(np.max(np.abs(gae_expected(s, pol, vt.v, gamma, lam) - adv))))
        return worst <= 1e-10, {"max_abs_error": worst, "tolerance": 1e-10}
    return _timed(1, "gae-unbiased", run)


def check_gae_bias() -> CheckResult:
    """Perturbed critics stay inside the closed-form bias bound at every grid point."""
    def run():
        grid, ok = [], True
        suite = mdp_suite()
        for gamma in GAE_GAMMAS:
            for lam in GAE_LAMBDAS:
                for eps in GAE_EPS:
                    bound = gae_bias_bound(gamma, lam, eps)
                    worst = 0.0
                    for i, spec in enumerate(suite):
                        s = spec.with_discount(gamma)
                        pol = random_policy(spec, i)
                        vt = exact_values(s, pol)
                        adv = vt.advantage()
                        rng = make_rng(SUITE_SEED, "gae_noise", i)
                        for _ in range(20):
                            v = vt.v.copy()
                            v[:, :-1] += rng.uniform(-eps, eps, size=v[:, :-1].shape)
                            bias = np.max(np.abs(gae_expected(s, pol, v, gamma, lam) - adv))
                            worst = max(worst, float(bias))
                    ok &= worst <= bound + 1e-10
                    grid.append({"gamma": gamma, "lambda": lam, "eps_max": eps, "max_bias": worst, "bound": bound})
        return ok, {"grid": grid}
    return _timed(2, "gae-bias", run)


def check_grae_bias() -> CheckResult:
    def run():
        worst = 0.0
        for i, spec in enumerate(mdp_suite()):
            for row in grae_conditional_bias(spec, random_policy(spec, i)):
                worst = max(worst, abs(row["bias"] - row["predicted"]))
        spec = build_degradation_mdp()
        rows = grae_conditional_bias(spec, degradation_reference_policy(spec))
        s1 = sorted({r["bias"] for r in rows if r["state"] == 1 and r["t"] == 1})
        ok = worst <= 1e-10 and len(s1) == 1 and s1[0] == 10.0
        return ok, {"max_abs_error": worst, "degradation_bias_s1": s1}
    return _timed(3, "grae-bias", run)


def check_grae_gradient() -> CheckResult:
    def run():
        worst = 0.0
        for i, spec in enumerate(mdp_suite()):
            worst = max(worst, verify_grae_gradient(spec, random_policy(spec, i), 1.0)[2])
        witness = discounted_witness_mdp()
        gap = verify_grae_gradient(witness, TabularSoftmaxPolicy.for_mdp(witness), 0.9)[2]
        return worst < 1e-8 and gap > 1e-3, {"max_gap_gamma_1": worst, "witness_gap_gamma_0.9": gap}
    return _timed(4, "grae-gradient", run)


def check_bandit_unbiased() -> CheckResult:
    def run():
        worst = 0.0
        for i, spec in enumerate(bandit_suite()):
            pol = random_policy(spec, i)
            batch = TreeLayout(spec, pol).batch(pol)
            vt = exact_values(spec, pol)
            v0 = np.array([vt.v[(int(s), ())] for s in batch.s0])
            worst = max(worst, float(np.max(np.abs(grae_batch(batch) - (batch.reward - v0)))))
        return worst <= 1e-12, {"max_abs_error": worst}
    return _timed(5, "bandit-unbiased", run)


def check_drift() -> CheckResult:
    def run():
        ppu = check_drift_properties("PPU", 10_000, SUITE_SEED)
        d = {"ppu_violations": ppu.violations, "ppu_min": ppu.min_value, "ppu_origin": ppu.origin_value,
             "ppu_origin_grad_norm": ppu.origin_grad_norm}
        ok = ppu.violations == 0 and ppu.origin_value == 0.0 and ppu.origin_grad_norm < 1e-6
        po = np.array([0.3, 0.5, 0.2])
        a = np.array([1.0, -0.2, -1.0])
        a -= po @ a
        for delta in (1.0, 10.0):
            val = grae_ppu_drift(po, po, a, delta, 0.2)
            d[f"grae_ppu_origin_delta_{delta:g}"] = val
            ok &= abs(val + delta) <= 1e-12
        for std in (0.5, 2.0):
            rep = check_drift_properties("GSPO", 10_000, SUITE_SEED, group_std=std)
            d[f"gspo_std_{std:g}"] = {"violations": rep.violations, "witness": rep.witness,
                                      "analytic": rep.analytic_witness}
            ok &= rep.witness is not None and rep.witness["value"] < 0
        grad = simplex_fd_gradient(lambda p: ppu_drift(po, p, a, 0.2), po)
        d["ppu_origin_grad_norm_direct"] = float(np.linalg.norm(grad))
        return ok, d
    return _timed(6, "drift", run)


def check_degradation() -> CheckResult:
    def run():
        r = reproduce_degradation()
        ok = abs(r.ratio_bad_grae - 1.2) <= 1e-3 and abs(r.ratio_bad_true - 0.8) <= 1e-3 and r.J_after_grae < r.J_before
        return ok, {"ratio_bad_grae": r.ratio_bad_grae, "ratio_bad_true": r.ratio_bad_true, "J_before": r.J_before,
                    "J_after_grae": r.J_after_grae, "J_after_true": r.J_after_true, "full_batch": r.full_batch}
    return _timed(7, "degradation", run)


@lru_cache(maxsize=None)
def _oracle_suite() -> tuple:
    rows = []
    for spec in seeupo_suite():
        j_bi = backward_induction(spec).j_star
        j_bf = brute_force_optimal(spec)[0]
        rows.append((spec, j_bi, j_bf))
    return tuple(rows)


def seeupo_runs(orders=("reverse", "natural"), config: UpdateConfig = SEEUPO_CONFIG,
                iterations: int = SEEUPO_ITERATIONS, seed: int = SUITE_SEED) -> list:
    """Exact-mode SeeUPO on the suite from a uniform start; one dict per (instance, order)."""
    out = []
    for i, (spec, j_star, j_bf) in enumerate(_oracle_suite()):
        for order in orders:
            rep = run_seeupo(spec, TabularSoftmaxPolicy.for_tree_bandit(spec), config, iterations, order=order,
                             mode="exact", seed=derive_seed(seed, "order_run", i), j_star=j_star)
            js = np.array(rep.returns)
            out.append({"instance": i, "order": order, "J_star": j_star, "J_star_brute_force": j_bf,
                        "initial_J": float(js[0]), "final_J": float(js[-1]),
                        "max_decrease": float(np.max(js[:-1] - js[1:])), "gap": float(j_star - js[-1])})
    return out


@lru_cache(maxsize=None)
def _seeupo_main_runs() -> tuple:
    return tuple(seeupo_runs())


def check_monotone() -> CheckResult:
    def run():
        runs = _seeupo_main_runs()
        worst = max(r["max_decrease"] for r in runs)
        return worst <= 1e-9, {"max_decrease": worst, "learning_rate": SEEUPO_CONFIG.learning_rate,
                               "per_key_scaling": SEEUPO_CONFIG.per_key_scaling}
    return _timed(8, "seeupo-monotone", run)


def check_optimal() -> CheckResult:
    def run():
        runs = [r for r in _seeupo_main_runs() if r["order"] == "reverse"]
        oracle_ok = all(r["J_star"] == r["J_star_brute_force"] for r in runs)
        worst = max(r["gap"] for r in runs)
        return oracle_ok and worst <= 1e-3, {"oracles_agree": oracle_ok, "max_gap": worst,
                                             "gaps": [r["gap"] for r in runs]}
    return _timed(9, "seeupo-optimal", run)


def order_compare(iterations: int = SEEUPO_ITERATIONS, config: UpdateConfig = SEEUPO_CONFIG) -> list:
    if iterations == SEEUPO_ITERATIONS and config == SEEUPO_CONFIG:
        rows = list(_seeupo_main_runs()) + seeupo_runs(("random",), config, iterations)
        return sorted(rows, key=lambda r: (r["instance"], ("reverse", "natural", "random").index(r["order"])))
    return seeupo_runs(("reverse", "natural", "random"), config, iterations)


def check_order_compare() -> CheckResult:
    """Report-only table; passes when reverse order reaches J* (the only asserted part)."""
    def run():
        rows = order_compare()
        worst = max(r["gap"] for r in rows if r["order"] == "reverse")
        table = [{k: r[k] for k in ("instance", "order", "J_star", "final_J", "gap")} for r in rows]
        return worst <= 1e-3, {"rows": table}
    return _timed(10, "order-compare", run)


def check_m_consistency() -> CheckResult:
    def run():
        cfg = UpdateConfig(learning_rate=2.0, epochs_per_batch=3, normalization="batch")
        worst = 0.0
        for i, (spec, _, _) in enumerate(_oracle_suite()[:10]):
            pol = random_policy(spec, i)
            source = BatchSource(spec, pol, "sampled", 4, 4, i)
            opt = Optimizer(pol, cfg)
            for k in range(3):
                _, row = seeupo_iteration(spec, pol, cfg, "random", "sampled", i, k, 4, 4, source, opt, True)
                worst = max(worst, row["m_consistency_error"])
        same = single_turn_identity()
        return worst <= 1e-12 and same, {"max_m_error": worst, "single_turn_identical": same}
    return _timed(11, "m-consistency", run)


def single_turn_identity(n_instances: int = 5, iterations: int = 6) -> bool:
    """T=1 SeeUPO and GRAE-PPU-seq produce bit-identical iterates on shared seeds."""
    cfg = UpdateConfig(learning_rate=0.5, epochs_per_batch=3, normalization="none")
    for i in range(n_instances):
        spec = generate_tree_bandit(derive_seed(SUITE_SEED, "single_turn", i),
                                    TreeBanditShape(num_states=(1, 3), horizon=1, actions=(2, 4)))
        for mode in ("sampled", "exact"):
            a, b = random_policy(spec, i), random_policy(spec, i)
            ra = run_seeupo(spec, a, cfg, iterations, mode=mode, seed=i, B=3, G=4)
            rb = run_algorithm("GRAE-PPU-seq", spec, b, cfg, iterations, seed=i, mode=mode, B=3, G=4)
            if ra.returns != rb.returns or not np.array_equal(a.logits, b.logits):
                return False
    return True


def check_determinism() -> CheckResult:
    """In-process repeat of a sampled run; cross-thread repeats live in the CLI tests."""
    def run():
        spec = _oracle_suite()[0][0]
        texts = []
        for _ in range(2):
            pol = random_policy(spec, 0)
            rep = run_seeupo(spec, pol, UpdateConfig(learning_rate=1.0, epochs_per_batch=2), 5, order="random",
                             mode="sampled", seed=3, B=4, G=4)
            texts.append(rep.to_csv() + rep.to_json() + pol.snapshot().to_json())
        return texts[0] == texts[1], {"bytes": len(texts[0])}
    return _timed(12, "determinism", run)


CHECKS = {
    "gae-unbiased": check_gae_unbiased,
    "gae-bias": check_gae_bias,
    "grae-bias": check_grae_bias,
    "grae-gradient": check_grae_gradient,
    "bandit-unbiased": check_bandit_unbiased,
    "drift": check_drift,
    "degradation": check_degradation,
    "seeupo-monotone": check_monotone,
    "seeupo-optimal": check_optimal,
    "order-compare": check_order_compare,
    "m-consistency": check_m_consistency,
    "determinism": check_determinism,
}


def run_checks(names=None) -> list:
    names = list(CHECKS) if not names else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise SpecError(f"unknown check(s): {unknown}; choose from {list(CHECKS)}")
    return [CHECKS[n]() for n in names]
