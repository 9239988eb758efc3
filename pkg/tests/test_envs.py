import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from seeupo_lab.advantage import exact_values
from seeupo_lab.envs import (MAX_TOTAL_PATHS, MdpShape, SpecError, TreeBanditShape, TreeBanditSpec,
                             build_degradation_mdp, enumerate_paths, generate_finite_mdp, generate_tree_bandit,
                             spec_from_json, spec_to_json)
from seeupo_lab.theory import degradation_reference_policy


def test_tree_two_by_two_has_four_rewards():
    spec = generate_tree_bandit(7, TreeBanditShape(num_states=1, horizon=2, actions=[2, 2], reward_range=(0, 1)))
    assert spec.reward_table.shape == (1, 4)
    assert np.all((spec.reward_table >= 0) & (spec.reward_table <= 1))
    assert spec.reward_bound == np.max(np.abs(spec.reward_table))


def test_tree_generation_is_deterministic():
    shape = TreeBanditShape(num_states=(1, 3), horizon=(2, 3), actions=(2, 4), early_stop_prob=0.3)
    a, b = generate_tree_bandit(7, shape), generate_tree_bandit(7, shape)
    assert spec_to_json(a) == spec_to_json(b)
    assert np.array_equal(a.reward_table, b.reward_table)


def test_tree_mixed_action_counts():
    spec = generate_tree_bandit(7, TreeBanditShape(num_states=2, horizon=3, actions=[2, 3, 2]))
    assert spec.reward_table.shape == (2, 12)


@pytest.mark.parametrize("shape", [TreeBanditShape(horizon=0), TreeBanditShape(horizon=2, actions=[2, 0])])
def test_tree_rejects_bad_shapes(shape):
    with pytest.raises(SpecError):
        generate_tree_bandit(0, shape)


def test_tree_path_cap():
    with pytest.raises(SpecError):
        generate_tree_bandit(0, TreeBanditShape(horizon=6, actions=10))
    assert MAX_TOTAL_PATHS == 100_000


def test_tree_spec_validation():
    with pytest.raises(SpecError):
        TreeBanditSpec(1, 2, (2, 2), np.zeros((1, 3)), np.array([1.0]), 1.0)
    with pytest.raises(SpecError):
        TreeBanditSpec(2, 1, (2,), np.zeros((2, 2)), np.array([0.7, 0.7]), 1.0)
    with pytest.raises(SpecError):
        TreeBanditSpec(1, 1, (2,), np.array([[0.0, 3.0]]), np.array([1.0]), 1.0)


def test_mdp_rows_normalized():
    spec = generate_finite_mdp(1, MdpShape(num_states=2, num_actions=2, horizon=2, discount=1.0))
    assert np.allclose(spec.transition.sum(axis=2), 1.0, atol=1e-12, rtol=0)
    assert np.all(spec.transition >= 0)


def test_mdp_deterministic_flag_one_hot():
    spec = generate_finite_mdp(3, MdpShape(num_states=4, num_actions=3, deterministic=True))
    assert np.all(np.sort(spec.transition, axis=2)[:, :, -1] == 1.0)
    assert np.all((spec.transition == 0) | (spec.transition == 1))


def test_mdp_generation_is_deterministic():
    shape = MdpShape(num_states=(2, 5), num_actions=(2, 3), horizon=(1, 4))
    assert spec_to_json(generate_finite_mdp(1, shape)) == spec_to_json(generate_finite_mdp(1, shape))


def test_mdp_rejects_bad_discount():
    spec = generate_finite_mdp(1, MdpShape())
    with pytest.raises(SpecError):
        spec.with_discount(1.5)


def test_enumerate_single_turn():
    spec = TreeBanditSpec(1, 1, (3,), np.array([[0.1, 0.2, 0.3]]), np.array([1.0]), 1.0)
    assert [p for p, _ in enumerate_paths(spec, 0)] == [(0,), (1,), (2,)]


def test_enumerate_lexicographic(tiny_tree):
    assert enumerate_paths(tiny_tree, 0) == [((0, 0), 0.0), ((0, 1), 1.0), ((1, 0), 2.0), ((1, 1), 0.0)]


def test_enumerate_mixed_counts():
    spec = generate_tree_bandit(7, TreeBanditShape(horizon=3, actions=[2, 3, 2]))
    assert len(enumerate_paths(spec, 0)) == 12


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31))
def test_enumeration_count_matches_independent_counter(actions, seed):
    spec = generate_tree_bandit(seed, TreeBanditShape(horizon=len(actions), actions=actions))
    count = 0
    for _ in itertools.product(*(range(n) for n in actions)):
        count += 1
    paths = enumerate_paths(spec, 0)
    assert len(paths) == count == math.prod(actions)
    assert [p for p, _ in paths] == sorted(p for p, _ in paths)


@given(st.integers(0, 2**31))
def test_generated_specs_revalidate(seed):
    spec = generate_tree_bandit(seed, TreeBanditShape(num_states=(1, 3), horizon=(1, 3), actions=(1, 3),
                                                      random_initial_distribution=True, early_stop_prob=0.3))
    spec.validate()
    mdp = generate_finite_mdp(seed, MdpShape(num_states=(1, 4), num_actions=(1, 3), horizon=(1, 3)))
    mdp.validate()


def test_early_termination_pads_with_noop():
    spec = TreeBanditSpec(1, 2, (2, 2), np.array([[0.5, 0.9, 0.2, 0.1]]), np.array([1.0]), 1.0,
                          frozenset({(0, (0,))}))
    assert list(spec.reachable_paths(0)) == [(0, 0), (1, 0), (1, 1)]
    assert not spec.is_decision_point(0, (0,))
    assert spec.is_decision_point(0, (1,))


def test_json_round_trip():
    tree = generate_tree_bandit(4, TreeBanditShape(num_states=2, horizon=3, actions=(2, 3), early_stop_prob=0.3))
    again = spec_from_json(spec_to_json(tree))
    assert spec_to_json(again) == spec_to_json(tree)
    assert again.terminal_prefixes == tree.terminal_prefixes
    mdp = build_degradation_mdp()
    assert spec_to_json(spec_from_json(spec_to_json(mdp))) == spec_to_json(mdp)


def test_degradation_values():
    spec = build_degradation_mdp()
    vt = exact_values(spec, degradation_reference_policy(spec))
    assert abs(vt.v[0, 0]) <= 1e-12
    assert abs(vt.v[1, 1] - 10.0) <= 1e-12
    assert vt.v[1, 1] - vt.v[0, 0] == pytest.approx(10.0, abs=1e-12)


def test_degradation_advantages_and_grae_estimates():
    spec = build_degradation_mdp()
    vt = exact_values(spec, degradation_reference_policy(spec))
    adv = vt.advantage()
    assert adv[1, :, 1].tolist() == pytest.approx([2.0, -5.0], abs=1e-12)
    # group-relative estimate at s1: total return (0 + r) minus V(s0)
    grae = vt.q[1, :, 1] - vt.v[0, 0]
    assert grae.tolist() == pytest.approx([12.0, 5.0], abs=1e-12)
