import numpy as np
import pytest

from seeupo_lab.advantage import exact_values
from seeupo_lab.envs import TreeBanditShape, TreeBanditSpec, generate_tree_bandit
from seeupo_lab.policy import HistoryKey, TabularSoftmaxPolicy
from seeupo_lab.rollout import (Group, Trajectory, build_turn_pools, collect_batch, enumerate_batch,
                                groups_from_json, groups_to_json, sample_tree_batch)


def test_group_mean_is_weighted_member_mean():
    spec = TreeBanditSpec(1, 1, (2,), np.array([[1.0, 0.0]]), np.array([1.0]), 1.0)
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
    (group,) = collect_batch(spec, pol, 1, 4, seed=3)
    rewards = [t.reward for t in group.trajectories]
    assert len(rewards) == 4
    assert group.mean_reward == pytest.approx(np.mean(rewards), abs=1e-12)


def test_rewards_one_zero_zero_one_mean_half():
    trajs = tuple(Trajectory(0, (a,), (np.log(0.5),), float(r), 0.25) for a, r in zip((0, 1, 1, 0), (1, 0, 0, 1)))
    group = Group(0, trajs, float(sum(t.weight * t.reward for t in trajs)))
    assert group.mean_reward == 0.5


def test_deterministic_policy_identical_samples():
    spec = generate_tree_bandit(1, TreeBanditShape(horizon=3, actions=3))
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
    pol.logits[:, 0] = 800.0
    (group,) = collect_batch(spec, pol, 1, 5, seed=0)
    assert {t.actions for t in group.trajectories} == {(0, 0, 0)}


def test_same_seed_same_batch():
    spec = generate_tree_bandit(1, TreeBanditShape(num_states=3, horizon=2, actions=3))
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec, init="gaussian", seed=2)
    assert groups_to_json(collect_batch(spec, pol, 4, 3, 9)) == groups_to_json(collect_batch(spec, pol, 4, 3, 9))


def test_group_streams_do_not_depend_on_batch_size():
    spec = generate_tree_bandit(1, TreeBanditShape(num_states=1, horizon=2, actions=3))
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
    small, _ = sample_tree_batch(spec, pol, 2, 4, 11)
    big, _ = sample_tree_batch(spec, pol, 6, 4, 11)
    assert np.array_equal(small.actions, big.actions[:8])


def test_exact_uniform_single_turn_mean():
    spec = TreeBanditSpec(1, 1, (2,), np.array([[0.0, 1.0]]), np.array([1.0]), 1.0)
    (group,) = enumerate_batch(spec, TabularSoftmaxPolicy.for_tree_bandit(spec))
    assert group.mean_reward == 0.5 and group.exact


def test_exact_weights_sum_to_one_and_mean_is_value():
    spec = generate_tree_bandit(5, TreeBanditShape(num_states=3, horizon=3, actions=(2, 3), early_stop_prob=0.3))
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec, init="gaussian", seed=1)
    vt = exact_values(spec, pol)
    for g in enumerate_batch(spec, pol):
        assert abs(sum(t.weight for t in g.trajectories) - 1.0) <= 1e-12
        assert abs(g.mean_reward - vt.v[(g.s0, ())]) <= 1e-10


def test_exact_mean_agrees_with_monte_carlo():
    # independent route: plain sampling, checked at three standard errors
    spec = generate_tree_bandit(8, TreeBanditShape(num_states=1, horizon=2, actions=3))
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec, init="gaussian", seed=4)
    (exact,) = enumerate_batch(spec, pol)
    batch, _ = sample_tree_batch(spec, pol, 1, 20_000, 0)
    se = batch.reward.std() / np.sqrt(batch.n)
    assert abs(batch.reward.mean() - exact.mean_reward) <= 3 * se


def test_turn_pools_one_sample_per_trajectory_per_turn():
    spec = generate_tree_bandit(2, TreeBanditShape(num_states=2, horizon=3, actions=2))
    pol = TabularSoftmaxPolicy.for_tree_bandit(spec)
    groups = collect_batch(spec, pol, 2, 3, 0)
    pools = build_turn_pools(groups)
    assert [len(p.samples) for p in pools] == [6, 6, 6]
    for pool in pools:
        assert sorted(s.trajectory for s in pool.samples) == list(range(6))
        assert all(len(s.key.prefix) == pool.turn - 1 for s in pool.samples)


def test_short_episode_gets_placeholder():
    spec = TreeBanditSpec(1, 3, (2, 2, 2), np.linspace(0, 1, 8)[None, :], np.array([1.0]), 1.0,
                          frozenset({(0, (0, 0))}))
    groups = enumerate_batch(spec, TabularSoftmaxPolicy.for_tree_bandit(spec))
    pools = build_turn_pools(groups)
    flags = {s.trajectory: s.is_placeholder for s in pools[2].samples}
    trajs = groups[0].trajectories
    short = [i for i, t in enumerate(trajs) if t.actions[:2] == (0, 0)]
    assert short and all(flags[i] for i in short)
    assert sum(flags.values()) == len(short)
    for pool in pools:
        for s in pool.samples:
            if not s.is_placeholder:
                assert s.key == HistoryKey(0, trajs[s.trajectory].actions[: pool.turn - 1], pool.turn)


def test_batch_json_round_trip():
    spec = generate_tree_bandit(2, TreeBanditShape(num_states=2, horizon=2, actions=2))
    groups = collect_batch(spec, TabularSoftmaxPolicy.for_tree_bandit(spec), 2, 2, 0)
    assert groups_from_json(groups_to_json(groups)) == groups


def test_rejects_empty_batches():
    spec = generate_tree_bandit(2, TreeBanditShape())
    with pytest.raises(ValueError):
        collect_batch(spec, TabularSoftmaxPolicy.for_tree_bandit(spec), 0, 2, 0)
    with pytest.raises(ValueError):
        build_turn_pools([])
