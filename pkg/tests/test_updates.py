import numpy as np
import pytest
from hypothesis import given, strategies as st

from seeupo_lab.advantage import exact_values, grae_batch
from seeupo_lab.envs import MdpShape, TreeBanditShape, build_degradation_mdp, generate_finite_mdp, generate_tree_bandit
from seeupo_lab.policy import StateKey, TabularSoftmaxPolicy
from seeupo_lab.rollout import MdpBatch, MdpLayout, TreeLayout, sample_tree_batch
from seeupo_lab.theory import (_single_path_batch, degradation_reference_policy, exact_return_gradient,
                               grae_policy_gradient)
from seeupo_lab.updates import (UpdateConfig, clipped_terms, ppu_gradient, ppu_objective, reinforce_gradient,
                                run_algorithm)


def _tree(seed, **kw):
    spec = generate_tree_bandit(seed, TreeBanditShape(num_states=(1, 2), horizon=(2, 3), actions=(2, 3), **kw))
    return spec, TabularSoftmaxPolicy.for_tree_bandit(spec, init="gaussian", seed=seed)


def _one_step_batch(adv_action=0):
    """One-state MDP, single sample taking ``adv_action``."""
    spec = generate_finite_mdp(0, MdpShape(num_states=1, num_actions=2, horizon=1))
    batch = MdpBatch(np.array([[0]]), np.array([[adv_action]]), np.zeros((1, 1)), np.ones(1), np.zeros(1, dtype=int),
                     np.ones(1), np.zeros(1, dtype=int), False)
    return spec, batch


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"clip_epsilon": 0}, {"epochs_per_batch": 0},
                                    {"kl_penalty_coefficient": -1}, {"normalization": "x"}, {"estimator": "x"},
                                    {"optimizer": "x"}, {"discount": 2}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        UpdateConfig(**kwargs)


def test_reinforce_zero_advantages():
    spec, pol = _tree(0)
    b = TreeLayout(spec, pol).batch(pol)
    assert not reinforce_gradient(b, np.zeros(b.n), pol).any()


def test_reinforce_single_sample_score():
    spec, batch = _one_step_batch(0)
    pol = TabularSoftmaxPolicy.for_mdp(spec)
    assert reinforce_gradient(batch, np.ones(1), pol).tolist() == [0.5, -0.5]


def test_reinforce_rejects_misaligned():
    spec, pol = _tree(0)
    b = TreeLayout(spec, pol).batch(pol)
    with pytest.raises(ValueError):
        reinforce_gradient(b, np.zeros(b.n + 1), pol)


@pytest.mark.parametrize("seed", range(4))
def test_exact_grae_reinforce_is_policy_gradient(seed):
    spec = generate_finite_mdp(seed, MdpShape(num_states=(2, 4), num_actions=(2, 3), horizon=(1, 3)))
    pol = TabularSoftmaxPolicy.for_mdp(spec, init="gaussian", seed=seed)
    assert np.max(np.abs(grae_policy_gradient(spec, pol) - exact_return_gradient(spec.with_discount(1.0), pol))) < 1e-8


@given(st.integers(0, 10_000))
def test_state_baseline_leaves_gradient_unchanged(seed):
    spec = generate_finite_mdp(seed, MdpShape(num_states=3, num_actions=2, horizon=3))
    pol = TabularSoftmaxPolicy.for_mdp(spec, init="gaussian", seed=seed)
    batch = MdpLayout(spec).batch(pol)
    adv = np.repeat(grae_batch(batch)[:, None], spec.horizon, axis=1)
    baseline = np.random.default_rng(seed).normal(size=(spec.num_states, spec.horizon))
    shifted = adv + baseline[batch.states, np.arange(spec.horizon)[None, :]]
    diff = reinforce_gradient(batch, adv, pol) - reinforce_gradient(batch, shifted, pol)
    assert np.max(np.abs(diff)) <= 1e-10


def _ratio_policy(r, p_old):
    """Two-action policy whose action-1 probability is r * p_old."""
    p = r * p_old
    return TabularSoftmaxPolicy([StateKey(0)], [2], np.log([1 - p, p]))


@pytest.mark.parametrize("adv,expected", [(-5.0, lambda r: -5 * r if r >= 0.8 else -4.0),
                                          (5.0, lambda r: 5 * r if r <= 1.2 else 6.0)])
@pytest.mark.parametrize("r", [0.5, 0.7, 0.79, 0.81, 1.0, 1.1, 1.19, 1.21, 1.5])
def test_clipped_objective_piecewise(adv, expected, r):
    _, batch = _one_step_batch(1)
    old = _ratio_policy(1.0, 0.4)
    cand = _ratio_policy(r, 0.4)
    val = ppu_objective(batch, np.array([[adv]]), cand, old, 0.2)
    assert val == pytest.approx(expected(r), abs=1e-12)


def test_objective_at_old_policy_is_mean_advantage():
    spec, pol = _tree(1)
    b = TreeLayout(spec, pol).batch(pol)
    adv = np.random.default_rng(0).normal(size=b.n)
    assert ppu_objective(b, adv, pol, pol, 0.2) == pytest.approx(np.dot(b.sample_weight(), adv), abs=1e-14)


def test_gradient_at_old_policy_positive_advantages_is_reinforce():
    spec, pol = _tree(2)
    b = TreeLayout(spec, pol).batch(pol)
    adv = np.abs(np.random.default_rng(0).normal(size=b.n)) + 0.1
    assert np.allclose(ppu_gradient(b, adv, pol, pol, 0.2), reinforce_gradient(b, adv, pol), atol=1e-14)


def test_clipped_sample_has_zero_gradient():
    _, batch = _one_step_batch(1)
    old = _ratio_policy(1.0, 0.4)
    cand = _ratio_policy(1.4, 0.4)
    assert not ppu_gradient(batch, np.array([[1.0]]), cand, old, 0.2).any()


@given(st.integers(0, 10_000), st.booleans())
def test_gradient_matches_finite_differences(seed, token_level):
    spec, old = _tree(seed)
    b = TreeLayout(spec, old).batch(old)
    rng = np.random.default_rng(seed)
    adv = rng.normal(size=(b.n, b.horizon) if token_level else b.n)
    cand = old.copy()
    cand.add_to_logits(rng.normal(0, 0.05, size=old.logits.shape))
    # stay away from the clip kinks
    from seeupo_lab.updates import _ratios
    ratio = _ratios(b, adv, cand, old)[2]
    if np.any(np.abs(np.abs(ratio - 1) - 0.2) < 1e-3):
        return
    base = cand.get_flat()
    probe = cand.copy()
    fd = np.zeros_like(base)
    for i in range(len(base)):
        e = np.zeros_like(base)
        e[i] = 1e-6
        probe.set_flat(base + e)
        up = ppu_objective(b, adv, probe, old, 0.2)
        probe.set_flat(base - e)
        fd[i] = (up - ppu_objective(b, adv, probe, old, 0.2)) / 2e-6
    assert np.max(np.abs(fd - ppu_gradient(b, adv, cand, old, 0.2))) <= 1e-6


@given(st.integers(0, 10_000), st.floats(0.1, 50))
def test_gradient_positively_homogeneous(seed, c):
    spec, old = _tree(seed)
    b = TreeLayout(spec, old).batch(old)
    adv = np.random.default_rng(seed).normal(size=b.n)
    cand = old.copy()
    cand.add_to_logits(np.random.default_rng(seed + 1).normal(0, 0.3, size=old.logits.shape))
    g = ppu_gradient(b, adv, cand, old, 0.2)
    assert np.allclose(ppu_gradient(b, c * adv, cand, old, 0.2), c * g, rtol=1e-12, atol=1e-15)


def test_clipping_direction_reversal_on_degradation_state():
    # d/dr of min(rA, clip(r)A) at r = 1 is A: negative for the true advantage, positive for GRAE
    for adv, sign in ((-5.0, -1.0), (5.0, 1.0)):
        h = 1e-6
        up, _ = clipped_terms(np.array([1 + h]), np.array([adv]), 0.2)
        down, _ = clipped_terms(np.array([1 - h]), np.array([adv]), 0.2)
        assert np.sign((up - down)[0]) == sign


def test_grae_reinforce_monotone_on_tree_bandit():
    spec, _ = _tree(11, early_stop_prob=0.2)
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
    rep = run_algorithm("GRAE-REINFORCE", spec, pol, UpdateConfig(learning_rate=0.5), 200)
    js = np.array(rep.returns)
    assert np.all(js[1:] - js[:-1] >= -1e-9)
    assert js[-1] > js[0]


def test_gae_ppu_exact_values_monotone():
    spec = generate_finite_mdp(5, MdpShape(num_states=3, num_actions=2, horizon=3))
    pol = TabularSoftmaxPolicy.for_mdp(spec)
    rep = run_algorithm("GAE-PPU", spec, pol, UpdateConfig(learning_rate=0.1, gae_lambda=1.0), 100)
    js = np.array(rep.returns)
    assert np.all(js[1:] - js[:-1] >= -1e-9)


def test_token_update_degrades_from_reference_on_bad_sample():
    from seeupo_lab.advantage import exact_return
    from seeupo_lab.updates import Optimizer, _token_update
    spec = build_degradation_mdp()
    ref = degradation_reference_policy(spec)
    batch = _single_path_batch(spec, [0, 1], [0, 1])
    adv = np.full((1, 2), batch.rewards.sum() - exact_values(spec, ref).v[0, 0])
    cfg = UpdateConfig(learning_rate=1e-3, epochs_per_batch=50)
    pol = ref.copy()
    _token_update(pol, batch.states, batch.actions, batch.sample_weight(), adv,
                  ref.probs_matrix()[batch.states, batch.actions], cfg, Optimizer(pol, cfg), ref.probs_matrix())
    assert exact_return(spec, pol) < exact_return(spec, ref)


def test_token_level_sampled_run_shows_decreases():
    spec = build_degradation_mdp()
    pol = TabularSoftmaxPolicy.for_mdp(spec)
    rep = run_algorithm("GRAE-PPU-token", spec, pol, UpdateConfig(learning_rate=1e-3, epochs_per_batch=300), 10,
                        seed=0, mode="sampled", B=2, G=2)
    js = np.array(rep.returns)
    assert np.any(js[1:] < js[:-1] - 1e-9)


@pytest.mark.parametrize("name,env", [("GAE-PPU", "tree"), ("GRAE-PPU-seq", "mdp"), ("PPO", "tree")])
def test_invalid_combinations(name, env):
    spec = generate_tree_bandit(0, TreeBanditShape()) if env == "tree" else build_degradation_mdp()
    pol = (TabularSoftmaxPolicy.for_tree_bandit(spec) if env == "tree" else TabularSoftmaxPolicy.for_mdp(spec))
    with pytest.raises(ValueError):
        run_algorithm(name, spec, pol, UpdateConfig(), 1)


@pytest.mark.parametrize("name", ["GRAE-REINFORCE", "GRAE-PPU-token", "GRAE-PPU-seq"])
@pytest.mark.parametrize("norm", ["none", "batch", "group"])
def test_sampled_runs_are_reproducible(name, norm):
    spec, _ = _tree(3)
    cfg = UpdateConfig(learning_rate=0.3, epochs_per_batch=2, normalization=norm, optimizer="adam",
                       kl_penalty_coefficient=0.01)
    outs = []
    for _ in range(2):
        pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
        rep = run_algorithm(name, spec, pol, cfg, 4, seed=7, mode="sampled", B=3, G=3, record_advantages=True)
        outs.append(rep.to_csv() + rep.advantages_csv())
    assert outs[0] == outs[1]


def test_leave_one_out_estimator_runs():
    spec, _ = _tree(3)
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
    rep = run_algorithm("GRAE-PPU-seq", spec, pol, UpdateConfig(estimator="GRAE-LOO"), 2, mode="sampled", B=2, G=3)
    assert len(rep.rows) == 3


def test_kl_penalty_pulls_toward_old_policy():
    spec, pol = _tree(4)
    b, _ = sample_tree_batch(spec, pol, 4, 4, 0)
    plain = run_algorithm("GRAE-PPU-seq", spec, pol.copy(), UpdateConfig(learning_rate=1.0, epochs_per_batch=5), 1,
                          mode="sampled", B=4, G=4)
    kl = run_algorithm("GRAE-PPU-seq", spec, pol.copy(),
                       UpdateConfig(learning_rate=1.0, epochs_per_batch=5, kl_penalty_coefficient=5.0), 1,
                       mode="sampled", B=4, G=4)
    j0 = plain.returns[0]
    assert abs(kl.returns[1] - j0) <= abs(plain.returns[1] - j0) + 1e-12


def test_group_normalization_rejected_for_step_advantages():
    spec = generate_finite_mdp(0, MdpShape(num_states=2, num_actions=2, horizon=2))
    with pytest.raises(ValueError):
        run_algorithm("GAE-PPU", spec, TabularSoftmaxPolicy.for_mdp(spec), UpdateConfig(normalization="group"), 1)
