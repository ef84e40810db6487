import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dropout_ope import mdp_core as mc
from dropout_ope.mdp_core import FactoredMDP, FactoredPolicy, InvalidMDPError, JointPolicy, NonErgodicError


def two_by_two(gamma=0.9):
    kernels = tuple(np.full((4, 2, 2), 0.5) for _ in range(2))
    rewards = tuple(np.ones((2, 2)) for _ in range(2))
    return FactoredMDP((2, 2), (2, 2), kernels, rewards, gamma)


def test_validate_accepts_well_formed():
    assert mc.validate(two_by_two()) == []


def test_validate_reports_row_sum_with_index():
    m = two_by_two()
    k0 = m.kernels[0].copy()
    k0[0, 0] = [0.5, 0.6]
    bad = FactoredMDP(m.state_sizes, m.action_sizes, (k0, m.kernels[1]), m.rewards, m.gamma)
    errors = mc.validate(bad)
    assert "row sum 1.1 at (agent 0, s=0, a=0)" in errors
    with pytest.raises(InvalidMDPError):
        bad.require_valid()


@pytest.mark.parametrize("gamma", [0.0, 1.0, 1.5])
def test_validate_rejects_discount(gamma):
    assert "discount must lie in (0,1)" in mc.validate(two_by_two(gamma))


def test_validate_flags_negative_probability_and_nan_reward():
    m = two_by_two()
    k1 = m.kernels[1].copy()
    k1[3, 1] = [1.2, -0.2]
    r0 = np.array(m.rewards[0])
    r0[1, 1] = np.nan
    errors = mc.validate(FactoredMDP(m.state_sizes, m.action_sizes, (m.kernels[0], k1), (r0, m.rewards[1]), 0.9))
    assert any("agent 1" in e and "s=3" in e for e in errors)
    assert any("reward" in e for e in errors)


def test_local_rewards_broadcast_to_joint_states():
    m = two_by_two()
    # r_n(s_n, a_n) = 1 everywhere, so r(s, a) = 2
    assert np.all(m.reward_matrix == 2.0)
    assert m.rewards[0].shape == (4, 2)


def test_joint_transition_factorizes_against_enumeration(rng):
    m = mc.random_mdp(rng, (2, 3), (2, 2))
    P = oracles.joint_kernel(m.state_sizes, m.action_sizes, m.kernels)
    assert np.allclose(m.transition_tensor, P, atol=1e-15)
    for s, a, s2 in [(0, 0, 0), (5, 3, 2), (3, 1, 4)]:
        assert mc.joint_transition(m, s, a, s2) == pytest.approx(P[s, a, s2], abs=1e-15)


def test_joint_transition_uniform_kernel():
    assert mc.joint_transition(two_by_two(), 0, 0, 3) == pytest.approx(0.25)


def test_joint_transition_index_error():
    with pytest.raises(IndexError):
        mc.joint_transition(two_by_two(), 4, 0, 0)


def test_reward_matrix_is_additive(rng):
    m = mc.random_mdp(rng, (2, 2, 2), (2, 2, 2))
    assert np.allclose(m.reward_matrix, oracles.joint_reward(m.state_sizes, m.action_sizes, m.rewards))


def test_policy_matrix_is_product(rng):
    pol = mc.random_policy(rng, 8, (2, 3, 2))
    assert np.allclose(pol.matrix, oracles.joint_policy((2, 3, 2), pol.tables))
    assert np.allclose(pol.matrix.sum(axis=1), 1.0)


def test_invalid_policy_rejected(small_mdp):
    t = np.full((4, 2), 0.5)
    t[2] = [0.7, 0.7]
    bad = FactoredPolicy((t, t))
    assert mc.validate_policy(small_mdp, bad)
    with pytest.raises(InvalidMDPError):
        mc.exact_value(small_mdp, bad)


def test_stationary_matches_eigenvector(small_mdp, soft_behavior):
    mu = mc.stationary_distribution(small_mdp, soft_behavior)
    chain = mc.induced_chain(small_mdp, soft_behavior)
    assert np.allclose(mu, oracles.stationary_by_eig(chain), atol=1e-12)
    assert np.allclose(mu @ chain, mu, atol=1e-13)


def test_stationary_rejects_periodic_and_reducible():
    flip = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(NonErgodicError, match="period"):
        mc.chain_stationary(flip)
    with pytest.raises(NonErgodicError, match="reducible"):
        mc.chain_stationary(np.eye(2))


def test_exact_value_matches_iteration(small_mdp, soft_behavior):
    P = oracles.joint_kernel(small_mdp.state_sizes, small_mdp.action_sizes, small_mdp.kernels)
    R = oracles.joint_reward(small_mdp.state_sizes, small_mdp.action_sizes, small_mdp.rewards)
    pi = oracles.joint_policy(small_mdp.action_sizes, soft_behavior.tables)
    assert np.allclose(mc.exact_value(small_mdp, soft_behavior), oracles.value_by_iteration(P, R, pi, 0.8), atol=1e-10)


def test_exact_value_bounded(small_mdp, soft_behavior):
    v = mc.exact_value(small_mdp, soft_behavior)
    assert np.all(np.abs(v) <= small_mdp.r_max / (1 - small_mdp.gamma) + 1e-12)


def test_joint_policy_matches_factored(small_mdp, soft_behavior):
    jp = JointPolicy(soft_behavior.matrix, small_mdp.action_sizes)
    assert np.allclose(mc.exact_value(small_mdp, jp), mc.exact_value(small_mdp, soft_behavior), atol=1e-12)


def test_finite_horizon_value_by_enumeration(small_mdp, soft_behavior):
    P = small_mdp.transition_tensor
    R = small_mdp.reward_matrix
    pi = soft_behavior.matrix
    v3 = mc.finite_horizon_value(small_mdp, soft_behavior, 3)
    for s0 in range(4):
        assert v3[s0] == pytest.approx(oracles.value_by_enumeration(P, R, pi, 0.8, 3, s0), abs=1e-12)
    assert np.all(mc.finite_horizon_value(small_mdp, soft_behavior, 0) == 0)


def test_finite_horizon_q_consistent_with_value(small_mdp, soft_behavior):
    q = mc.finite_horizon_q(small_mdp, soft_behavior, 6)
    v = mc.finite_horizon_value(small_mdp, soft_behavior, 6)
    assert np.allclose((soft_behavior.matrix * q[6]).sum(axis=1), v, atol=1e-12)
    assert np.all(q[0] == 0)


def test_optimal_policy_beats_every_deterministic_policy(small_mdp):
    best = oracles.best_deterministic_value(small_mdp.transition_tensor, small_mdp.reward_matrix, small_mdp.gamma)
    v = mc.exact_value(small_mdp, mc.optimal_policy(small_mdp))
    assert np.allclose(v, best, atol=1e-9)


def test_optimal_policy_tie_break_lowest_index():
    m = two_by_two()  # every action identical
    pol = mc.optimal_policy(m)
    assert all(np.all(t[:, 0] == 1.0) for t in pol.tables)


def test_epsilon_soft_rows():
    pol = mc.epsilon_soft(mc.deterministic_policy((2, 2), np.array([0, 3])), 0.2)
    assert np.allclose(pol.tables[0], [[0.9, 0.1], [0.1, 0.9]])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), sizes=st.lists(st.integers(1, 3), min_size=1, max_size=3))
def test_random_instances_are_valid(seed, sizes):
    rng = np.random.default_rng(seed)
    m = mc.random_mdp(rng, sizes, [2] * len(sizes))
    assert mc.validate(m) == []
    assert np.allclose(m.transition_tensor.sum(axis=2), 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_bellman_fixed_point(seed):
    rng = np.random.default_rng(seed)
    m = mc.random_mdp(rng, (2, 2), (2, 2), gamma=0.7)
    pol = mc.random_policy(rng, 4, (2, 2))
    v = mc.exact_value(m, pol)
    assert np.allclose(mc.bellman_expectation(m, pol, v), v, atol=1e-10)
