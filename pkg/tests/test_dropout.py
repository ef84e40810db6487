import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dropout_ope import mdp_core as mc
from dropout_ope.dropout import (
    DropoutIndex,
    DropoutSpec,
    ZeroMassError,
    augment_policy,
    build_post_dropout,
    check_value_identity,
    value_identity_sides,
    marginalize_kernel,
    marginalize_policy,
    marginalize_reward,
    optimality_gap,
    stationary_weights,
)
from dropout_ope.mdp_core import FactoredMDP, FactoredPolicy, JointPolicy


def _weights_by_loops(mdp, mu, d):
    """conditional w[s_bar][s_N] from a stationary vector, by enumeration."""
    keep = [n for n in range(mdp.n_agents) if n != d]
    post_sizes = [mdp.state_sizes[n] for n in keep]
    w = {}
    for s in range(mdp.n_states):
        subs = oracles.digits(s, mdp.state_sizes)
        sb = oracles.joint([subs[n] for n in keep], post_sizes)
        w.setdefault(sb, {})[subs[d]] = mu[s]
    for sb in w:
        tot = sum(w[sb].values())
        w[sb] = {k: v / tot for k, v in w[sb].items()}
    return keep, post_sizes, w


@pytest.mark.parametrize("d", [0, 1, 2])
def test_marginalized_kernel_and_reward_by_enumeration(rng, d):
    mdp = mc.random_mdp(rng, (2, 3, 2), (2, 2, 2))
    pi = mc.epsilon_soft(mc.optimal_policy(mdp), 0.2)
    spec = DropoutSpec(d, pi)
    mu = oracles.stationary_by_eig(mc.induced_chain(mdp, pi))
    keep, post_sizes, w = _weights_by_loops(mdp, mu, d)

    kernels = marginalize_kernel(mdp, spec)
    rewards = marginalize_reward(mdp, spec)
    for i, n in enumerate(keep):
        for sb, ws in w.items():
            sb_digits = oracles.digits(sb, post_sizes)
            for a in range(mdp.action_sizes[n]):
                expect_p = np.zeros(mdp.state_sizes[n])
                expect_r = 0.0
                for sN, weight in ws.items():
                    full = list(sb_digits)
                    full.insert(d, sN)
                    s = oracles.joint(full, mdp.state_sizes)
                    expect_p += weight * mdp.kernels[n][s, a]
                    expect_r += weight * mdp.rewards[n][s, a]
                    if i == 0:
                        expect_r += weight * sum(pi.tables[d][s, b] * mdp.rewards[d][s, b] for b in range(mdp.action_sizes[d]))
                assert np.allclose(kernels[i][sb, a], expect_p, atol=1e-12)
                assert rewards[i][sb, a] == pytest.approx(expect_r, abs=1e-12)


def test_post_dropout_mdp_is_valid(rng):
    mdp = mc.random_mdp(rng, (3, 3, 3), (2, 2, 2))
    spec = DropoutSpec(1, mc.epsilon_soft(mc.optimal_policy(mdp), 0.2))
    post = build_post_dropout(mdp, spec)
    assert post.state_sizes == (3, 3)
    assert mc.validate(post) == []


def test_refreshed_mode_uses_given_table(rng):
    mdp = mc.random_mdp(rng, (2, 2), (2, 2))
    table = (np.array([[0.0, 0.0], [1.0, 1.0]]),)
    spec = DropoutSpec(0, mc.uniform_policy(4, (2, 2)), "refreshed", table)
    post = build_post_dropout(mdp, spec)
    assert np.allclose(post.reward_matrix, [[0, 0], [1, 1]])


def test_refreshed_mode_requires_table(rng):
    with pytest.raises(ValueError):
        DropoutSpec(0, mc.uniform_policy(4, (2, 2)), "refreshed")


def test_marginal_weighting_ignores_remaining_state(rng):
    mdp = mc.random_mdp(rng, (2, 3), (2, 2))
    pi = mc.epsilon_soft(mc.optimal_policy(mdp), 0.2)
    idx = DropoutIndex.of(mdp, 1)
    mu = mc.stationary_distribution(mdp, pi)
    w = stationary_weights(mu, idx, "marginal")
    assert np.allclose(w, w[0])
    assert np.allclose(w[0], mu.reshape(2, 3).sum(axis=0))


def test_zero_mass_state_raises():
    idx = DropoutIndex((2, 2), (2, 2), 1)
    with pytest.raises(ZeroMassError, match="s_bar=1"):
        stationary_weights(np.array([0.5, 0.5, 0.0, 0.0]), idx)


def test_dropout_index_roundtrip():
    idx = DropoutIndex((2, 3, 2), (2, 2, 3), 1)
    for s in range(12):
        assert idx.full_state[idx.post_state[s], idx.dropped_state[s]] == s
    assert idx.post_action_sizes == (2, 3)


def test_augmented_policy_is_product(rng):
    mdp = mc.random_mdp(rng, (2, 2, 2), (2, 2, 2))
    pi = mc.random_policy(rng, 8, (2, 2, 2))
    phi = mc.random_policy(rng, 4, (2, 2))
    aug = augment_policy(mdp, phi, pi.tables[1], 1)
    idx = DropoutIndex.of(mdp, 1)
    for s in range(8):
        for a in range(8):
            expect = phi.matrix[idx.post_state[s], idx.post_action[a]] * pi.tables[1][s, idx.dropped_action[a]]
            assert aug.matrix[s, a] == pytest.approx(expect, abs=1e-15)
    joint = augment_policy(mdp, JointPolicy(phi.matrix, (2, 2)), pi.tables[1], 1)
    assert isinstance(joint, JointPolicy)
    assert np.allclose(joint.matrix, aug.matrix)


def test_marginalized_policy_is_weighted_average(rng):
    mdp = mc.random_mdp(rng, (2, 2), (2, 3))
    pi = mc.random_policy(rng, 4, (2, 3))
    spec = DropoutSpec(1, pi)
    mu = mc.stationary_distribution(mdp, pi)
    pim = marginalize_policy(mdp, spec, pi)
    for sb in range(2):
        w = mu[[2 * sb, 2 * sb + 1]] / mu[[2 * sb, 2 * sb + 1]].sum()
        assert np.allclose(pim.matrix[sb], w[0] * pi.tables[0][2 * sb] + w[1] * pi.tables[0][2 * sb + 1])
    assert np.allclose(pim.matrix.sum(axis=1), 1.0)


def decoupled_instance(rng, coupled_dropped=True):
    """Agent 0 ignores agent 1 entirely; agent 1 carries no reward."""
    k0_local = rng.dirichlet(np.ones(2), size=(2, 2))  # (s_0, a_0, s_0')
    k0 = np.repeat(k0_local, 2, axis=0)  # joint s = (s_0, s_1): rows 0,1 share s_0 = 0
    k1 = rng.dirichlet(np.ones(2), size=(4, 2)) if coupled_dropped else np.tile(rng.dirichlet(np.ones(2), size=(1, 2, 2))[0], (2, 1, 1))
    r0 = np.repeat(rng.random((2, 2)), 2, axis=0)
    r1 = np.zeros((4, 2))
    mdp = FactoredMDP((2, 2), (2, 2), (k0, k1), (r0, r1), 0.9)
    p0 = np.repeat(rng.dirichlet(np.ones(2), size=2), 2, axis=0)
    p1 = rng.dirichlet(np.ones(2), size=4)
    return mdp, FactoredPolicy((p0, p1))


def test_value_identity_exact_when_remaining_agent_is_decoupled(rng):
    mdp, pi = decoupled_instance(rng)
    assert check_value_identity(mdp, DropoutSpec(1, pi)) < 1e-10


def test_value_identity_residual_on_coupled_instance():
    # generic coupling breaks the identity; the residual is reported, not hidden
    rng = np.random.default_rng(3)
    mdp = mc.random_mdp(rng, (2, 2), (2, 2))
    pi = mc.epsilon_soft(mc.optimal_policy(mdp), 0.2)
    sides = value_identity_sides(mdp, DropoutSpec(1, pi))
    assert sides.residual == pytest.approx(np.max(np.abs(sides.post_value - sides.marginalized_value)))
    assert sides.residual > 1e-6


def test_value_identity_rejects_refreshed(rng):
    mdp = mc.random_mdp(rng, (2, 2), (2, 2))
    spec = DropoutSpec(1, mc.uniform_policy(4, (2, 2)), "refreshed", (np.zeros((2, 2)),))
    with pytest.raises(ValueError):
        check_value_identity(mdp, spec)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.integers(0, 1))
def test_optimality_gap_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    mdp = mc.random_mdp(rng, (2, 3), (2, 2))
    g = optimality_gap(mdp, DropoutSpec(d, mc.epsilon_soft(mc.optimal_policy(mdp), 0.2)))
    assert np.all(g.gap >= -1e-9)
