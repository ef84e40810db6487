"""Post-dropout MDP construction by marginalizing one agent's factor.

The remaining agents keep their order; post-dropout joint states and actions
are enumerated in mixed-radix order over the remaining agents exactly as in
:mod:`dropout_ope.mdp_core`.

Expectations over the dropped substate use weights ``w(s_N | s_bar)`` taken
from the stationary distribution ``mu`` of the pre-dropout chain under the
behavior policy.  Two weightings are available:

``"conditional"`` (default)
    ``w(s_N | s_bar) = mu(s_bar, s_N) / sum_k mu(s_bar, k)``
``"marginal"``
    ``w(s_N | s_bar) = mu(s_N)``, the dropped agent's stationary marginal.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .mdp_core import (
    FactoredMDP,
    FactoredPolicy,
    InvalidMDPError,
    JointPolicy,
    Policy,
    exact_value,
    index_grid,
    optimal_policy,
    stationary_distribution,
    validate,
)

REWARD_MODES = ("marginalized", "refreshed")
WEIGHTINGS = ("conditional", "marginal")


class ZeroMassError(ValueError):
    """A post-dropout state has no stationary mass, so its conditional is undefined."""


@dataclass(frozen=True, eq=False)
class DropoutSpec:
    """Which agent leaves, the policy the marginalization is taken under, and the new reward."""

    dropped_agent: int
    behavior_policy: FactoredPolicy
    reward_mode: str = "marginalized"
    refreshed_rewards: Optional[tuple] = None
    weighting: str = "conditional"

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        if self.reward_mode == "refreshed":
            if self.refreshed_rewards is None:
                raise ValueError("refreshed reward mode needs a reward table per remaining agent")
            tables = tuple(np.asarray(t, dtype=float) for t in self.refreshed_rewards)
            if not all(np.all(np.isfinite(t)) for t in tables):
                raise ValueError("refreshed reward table must be finite")
            object.__setattr__(self, "refreshed_rewards", tables)


class DropoutIndex:
    """Index bookkeeping between pre- and post-dropout joint states and actions."""

    def __init__(self, state_sizes, action_sizes, dropped_agent: int):
        n_agents = len(state_sizes)
        if not 0 <= dropped_agent < n_agents:
            raise ValueError(f"dropped agent {dropped_agent} out of range for {n_agents} agents")
        if n_agents < 2:
            raise ValueError("dropout needs at least two agents")
        self.dropped = dropped_agent
        self.keep = [n for n in range(n_agents) if n != dropped_agent]
        self.state_sizes = tuple(state_sizes)
        self.action_sizes = tuple(action_sizes)
        self.post_state_sizes = tuple(state_sizes[n] for n in self.keep)
        self.post_action_sizes = tuple(action_sizes[n] for n in self.keep)

        sgrid = index_grid(state_sizes)
        agrid = index_grid(action_sizes)
        self.post_state = np.ravel_multi_index(tuple(sgrid[:, self.keep].T), self.post_state_sizes)
        self.dropped_state = sgrid[:, dropped_agent]
        self.post_action = np.ravel_multi_index(tuple(agrid[:, self.keep].T), self.post_action_sizes)
        self.dropped_action = agrid[:, dropped_agent]
        self.full_state = np.empty((int(np.prod(self.post_state_sizes)), state_sizes[dropped_agent]), dtype=int)
        self.full_state[self.post_state, self.dropped_state] = np.arange(sgrid.shape[0])

    @classmethod
    def of(cls, mdp: FactoredMDP, dropped_agent: int) -> "DropoutIndex":
        return cls(mdp.state_sizes, mdp.action_sizes, dropped_agent)

    @property
    def n_post_states(self) -> int:
        return self.full_state.shape[0]

    @property
    def n_dropped_states(self) -> int:
        return self.full_state.shape[1]


class _Marginalizer:
    """Caches the index map and weights shared by the marginalization operations."""

    def __init__(self, mdp: FactoredMDP, spec: DropoutSpec):
        self.mdp = mdp
        self.spec = spec
        self.index = DropoutIndex.of(mdp, spec.dropped_agent)

    @cached_property
    def stationary(self) -> np.ndarray:
        return stationary_distribution(self.mdp, self.spec.behavior_policy)

    @cached_property
    def weights(self) -> np.ndarray:
        return stationary_weights(self.stationary, self.index, self.spec.weighting)


def stationary_weights(mu: np.ndarray, index: DropoutIndex, weighting: str = "conditional") -> np.ndarray:
    """Weights ``w[s_bar, s_N]`` used to average out the dropped substate."""
    mass = np.asarray(mu)[index.full_state]
    if weighting == "marginal":
        marginal = mass.sum(axis=0)
        return np.broadcast_to(marginal, mass.shape).copy()
    totals = mass.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if empty.size:
        sbar = int(empty[0])
        subs = np.unravel_index(sbar, index.post_state_sizes)
        raise ZeroMassError(f"post-dropout state s_bar={sbar} {tuple(int(x) for x in subs)} has zero stationary mass")
    return mass / totals[:, None]


def _weighted(weights: np.ndarray, per_pair: np.ndarray) -> np.ndarray:
    """``sum_k weights[b, k] * per_pair[b, k, ...]``."""
    return np.einsum("bk,bk...->b...", weights, per_pair)


def marginalize_kernel(mdp: FactoredMDP, spec: DropoutSpec) -> tuple:
    """Per remaining agent, ``P(s_n' | s_bar, a_n) = sum_{s_N} P(s_n' | s, a_n) w(s_N | s_bar)``."""
    m = _Marginalizer(mdp, spec)
    return _kernels(m)


def _kernels(m: _Marginalizer) -> tuple:
    return tuple(_weighted(m.weights, m.mdp.kernels[n][m.index.full_state]) for n in m.index.keep)


def marginalize_reward(mdp: FactoredMDP, spec: DropoutSpec) -> tuple:
    """Additive tables whose sum is ``E_{s_N, a_N}[r(s, a)]``.

    Each remaining agent's table is its own reward averaged over ``s_N``.
    The dropped agent's expected reward depends on ``s_bar`` only, so it is
    folded into the first remaining agent's table.
    """
    return _rewards(_Marginalizer(mdp, spec))


def _rewards(m: _Marginalizer) -> tuple:
    idx, mdp = m.index, m.mdp
    tables = [_weighted(m.weights, mdp.rewards[n][idx.full_state]) for n in idx.keep]
    d = idx.dropped
    dropped_mean = (m.spec.behavior_policy.tables[d] * mdp.rewards[d]).sum(axis=1)
    tables[0] = tables[0] + _weighted(m.weights, dropped_mean[idx.full_state])[:, None]
    return tuple(tables)


def build_post_dropout(mdp: FactoredMDP, spec: DropoutSpec) -> FactoredMDP:
    """The MDP over the remaining agents with marginalized kernels and the chosen reward."""
    m = _Marginalizer(mdp, spec)
    kernels = _kernels(m)
    rewards = _rewards(m) if spec.reward_mode == "marginalized" else spec.refreshed_rewards
    post = FactoredMDP(m.index.post_state_sizes, m.index.post_action_sizes, kernels, rewards, mdp.gamma)
    errors = validate(post)
    if errors:
        raise InvalidMDPError(errors)
    return post


def augment_policy(mdp: FactoredMDP, phi: Policy, pi_dropped: np.ndarray, dropped_agent: int) -> Policy:
    """Extend a post-dropout policy to the full system with the dropped agent's behavior factor.

    ``phi'(a | s) = phi(a_bar | s_bar) * pi_N(a_N | s)``.  A factored ``phi``
    gives a factored result; a joint ``phi`` gives a joint one.
    """
    idx = DropoutIndex.of(mdp, dropped_agent)
    pi_dropped = np.asarray(pi_dropped, dtype=float)
    if pi_dropped.shape != (mdp.n_states, mdp.action_sizes[dropped_agent]):
        raise ValueError(f"dropped-agent factor has shape {pi_dropped.shape}")
    if phi.n_states != idx.n_post_states or tuple(phi.action_sizes) != idx.post_action_sizes:
        raise ValueError("phi does not match the post-dropout state/action spaces")
    if isinstance(phi, FactoredPolicy):
        tables = list(phi.tables[i][idx.post_state] for i in range(len(idx.keep)))
        tables.insert(dropped_agent, pi_dropped)
        return FactoredPolicy(tuple(tables))
    lifted = phi.matrix[idx.post_state][:, idx.post_action]
    return JointPolicy(lifted * pi_dropped[:, idx.dropped_action], mdp.action_sizes)


def marginalize_policy(mdp: FactoredMDP, spec: DropoutSpec, pi: Policy) -> JointPolicy:
    """``pi^-(a_bar | s_bar) = E_{s_N}[ prod_{n != N} pi_n(a_n | s) ]`` under the dropout spec's weighting."""
    m = _Marginalizer(mdp, spec)
    idx = m.index
    if isinstance(pi, FactoredPolicy):
        remaining = FactoredPolicy(tuple(pi.tables[n] for n in idx.keep)).matrix
    else:
        remaining = np.zeros((mdp.n_states, int(np.prod(idx.post_action_sizes))))
        np.add.at(remaining.T, idx.post_action, pi.matrix.T)
    return JointPolicy(_weighted(m.weights, remaining[idx.full_state]), idx.post_action_sizes)


@dataclass(frozen=True)
class ValueIdentityCheck:
    """Both sides of the value-marginalization identity."""

    post_value: np.ndarray
    marginalized_value: np.ndarray

    @property
    def residual(self) -> float:
        return float(np.max(np.abs(self.post_value - self.marginalized_value)))


def value_identity_sides(mdp: FactoredMDP, spec: DropoutSpec, pi: Optional[Policy] = None) -> ValueIdentityCheck:
    if spec.reward_mode != "marginalized":
        raise ValueError("the value-marginalization check requires marginalized rewards")
    pi = spec.behavior_policy if pi is None else pi
    m = _Marginalizer(mdp, spec)
    post = build_post_dropout(mdp, spec)
    u = exact_value(post, marginalize_policy(mdp, spec, pi))
    v = exact_value(mdp, pi)
    return ValueIdentityCheck(u, _weighted(m.weights, v[m.index.full_state]))


def check_value_identity(mdp: FactoredMDP, spec: DropoutSpec, pi: Optional[Policy] = None) -> float:
    """Max over ``s_bar`` of ``|U^{pi^-}(s_bar) - E_{s_N}[V^pi(s)]|``."""
    return value_identity_sides(mdp, spec, pi).residual


@dataclass(frozen=True, eq=False)
class OptimalityGap:
    marginalized_policy: JointPolicy
    post_optimal_policy: FactoredPolicy
    marginalized_value: np.ndarray
    optimal_value: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.optimal_value - self.marginalized_value


def optimality_gap(mdp: FactoredMDP, spec: DropoutSpec) -> OptimalityGap:
    """Value lost on the post-dropout system by marginalizing the old optimal policy."""
    post = build_post_dropout(mdp, spec)
    pi_star_marg = marginalize_policy(mdp, spec, optimal_policy(mdp))
    phi_star = optimal_policy(post)
    return OptimalityGap(pi_star_marg, phi_star, exact_value(post, pi_star_marg), exact_value(post, phi_star))
