"""Tabular factored MDPs, factored policies and exact reference solvers.

Joint states and joint actions are enumerated in mixed-radix order with
agent 0 as the most significant digit, i.e. C-order ``np.ravel_multi_index``
over ``state_sizes`` (resp. ``action_sizes``).

Per-agent tables have the following shapes, with ``S`` the number of joint
states:

* ``kernels[n]``  -- ``(S, A_n, S_n)``, entry ``P(s_n' | s, a_n)``
* ``rewards[n]``  -- ``(S, A_n)``, entry ``r_n(s, a_n)``
* ``policy[n]``   -- ``(S, A_n)``, entry ``pi_n(a_n | s)``

Rewards given per agent as local ``(S_n, A_n)`` tables are broadcast to joint
states on construction, so ``r(s, a) = sum_n r_n(s, a_n)`` always holds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence, Union

import numpy as np

ROW_TOL = 1e-12
DENSE_SOLVE_LIMIT = 4096


class InvalidMDPError(ValueError):
    """Raised when an MDP or policy violates its invariants."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class NonErgodicError(ValueError):
    """Raised when an induced Markov chain is reducible or periodic."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def index_grid(sizes: Sequence[int]) -> np.ndarray:
    """Digits of every mixed-radix index, shape ``(prod(sizes), len(sizes))``."""
    total = int(np.prod(sizes))
    return np.stack(np.unravel_index(np.arange(total), tuple(sizes)), axis=1)


@dataclass(frozen=True, eq=False)
class FactoredMDP:
    """A factored MDP with per-agent kernels conditioned on the joint state.

    Construction only checks shapes; stochasticity and range invariants are
    reported by :func:`validate` and enforced by the solvers.
    """

    state_sizes: tuple
    action_sizes: tuple
    kernels: tuple
    rewards: tuple
    gamma: float

    def __post_init__(self):
        state_sizes = tuple(int(x) for x in self.state_sizes)
        action_sizes = tuple(int(x) for x in self.action_sizes)
        if len(state_sizes) != len(action_sizes) or not state_sizes:
            raise ValueError("state_sizes and action_sizes must be nonempty and of equal length")
        n_states = int(np.prod(state_sizes))
        if len(self.kernels) != len(state_sizes) or len(self.rewards) != len(state_sizes):
            raise ValueError("need one kernel and one reward table per agent")
        kernels, rewards = [], []
        for n, (k, r) in enumerate(zip(self.kernels, self.rewards)):
            k = np.asarray(k, dtype=float)
            if k.shape != (n_states, action_sizes[n], state_sizes[n]):
                raise ValueError(
                    f"kernel of agent {n} has shape {k.shape}, "
                    f"expected {(n_states, action_sizes[n], state_sizes[n])}"
                )
            r = np.asarray(r, dtype=float)
            if r.shape == (state_sizes[n], action_sizes[n]) and n_states != state_sizes[n]:
                r = r[index_grid(state_sizes)[:, n]]
            if r.shape != (n_states, action_sizes[n]):
                raise ValueError(f"reward of agent {n} has shape {r.shape}")
            kernels.append(_readonly(k))
            rewards.append(_readonly(r))
        object.__setattr__(self, "state_sizes", state_sizes)
        object.__setattr__(self, "action_sizes", action_sizes)
        object.__setattr__(self, "kernels", tuple(kernels))
        object.__setattr__(self, "rewards", tuple(rewards))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_agents(self) -> int:
        return len(self.state_sizes)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_sizes))

    @property
    def n_actions(self) -> int:
        return int(np.prod(self.action_sizes))

    @cached_property
    def state_grid(self) -> np.ndarray:
        return index_grid(self.state_sizes)

    @cached_property
    def action_grid(self) -> np.ndarray:
        return index_grid(self.action_sizes)

    def joint_state(self, substates: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(substates), self.state_sizes))

    def joint_action(self, subactions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(subactions), self.action_sizes))

    @cached_property
    def reward_matrix(self) -> np.ndarray:
        """Summed reward ``r(s, a)``, shape ``(S, A)``."""
        r = np.zeros((self.n_states, self.n_actions))
        for n in range(self.n_agents):
            r += self.rewards[n][:, self.action_grid[:, n]]
        r.setflags(write=False)
        return r

    @property
    def r_max(self) -> float:
        """Largest reward magnitude over all ``(s, a)``."""
        return float(np.max(np.abs(self.reward_matrix)))

    @cached_property
    def transition_tensor(self) -> np.ndarray:
        """Dense joint kernel ``P(s' | s, a)``, shape ``(S, A, S)``."""
        S, A = self.n_states, self.n_actions
        out = np.ones((S, A, S))
        for n in range(self.n_agents):
            k = self.kernels[n][:, self.action_grid[:, n], :]
            out *= k[:, :, self.state_grid[:, n]]
        out.setflags(write=False)
        return out

    @cached_property
    def _validated(self) -> bool:
        errors = validate(self)
        if errors:
            raise InvalidMDPError(errors)
        return True

    def require_valid(self) -> "FactoredMDP":
        self._validated
        return self

    def with_rewards(self, rewards: Sequence[np.ndarray]) -> "FactoredMDP":
        return FactoredMDP(self.state_sizes, self.action_sizes, self.kernels, tuple(rewards), self.gamma)


@dataclass(frozen=True, eq=False)
class FactoredPolicy:
    """Per-agent stochastic maps ``pi_n(a_n | s)`` from the joint state."""

    tables: tuple

    def __post_init__(self):
        tables = tuple(_readonly(t) for t in self.tables)
        if not tables or any(t.ndim != 2 for t in tables):
            raise ValueError("policy tables must be 2-D (S, A_n)")
        if len({t.shape[0] for t in tables}) != 1:
            raise ValueError("policy tables disagree on the number of joint states")
        object.__setattr__(self, "tables", tables)

    @property
    def n_states(self) -> int:
        return self.tables[0].shape[0]

    @property
    def action_sizes(self) -> tuple:
        return tuple(t.shape[1] for t in self.tables)

    @cached_property
    def matrix(self) -> np.ndarray:
        """Joint action distribution ``pi(a | s)``, shape ``(S, A)``."""
        grid = index_grid(self.action_sizes)
        out = np.ones((self.n_states, grid.shape[0]))
        for n, t in enumerate(self.tables):
            out *= t[:, grid[:, n]]
        out.setflags(write=False)
        return out

    def errors(self) -> list[str]:
        errs = []
        for n, t in enumerate(self.tables):
            errs.extend(_row_errors(t, f"policy agent {n}", ("s",), "a"))
        return errs


@dataclass(frozen=True, eq=False)
class JointPolicy:
    """A policy over joint actions that need not factor across agents."""

    table: np.ndarray
    action_sizes: tuple

    def __post_init__(self):
        table = _readonly(self.table)
        sizes = tuple(int(x) for x in self.action_sizes)
        if table.ndim != 2 or table.shape[1] != int(np.prod(sizes)):
            raise ValueError(f"joint policy table {table.shape} does not match action sizes {sizes}")
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "action_sizes", sizes)

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.table

    def errors(self) -> list[str]:
        return _row_errors(self.table, "joint policy", ("s",), "a")


Policy = Union[FactoredPolicy, JointPolicy]


def _row_errors(table: np.ndarray, what: str, index_names: Sequence[str], entry_name: str = "k") -> list[str]:
    def where(idx, names):
        return ", ".join([what] + [f"{name}={int(i)}" for name, i in zip(names, idx)])

    names = tuple(index_names) + (entry_name,)
    if not np.all(np.isfinite(table)):
        return [f"non-finite probability at ({where(np.argwhere(~np.isfinite(table))[0], names)})"]
    errs = [
        f"probability {table[tuple(idx)]:.6g} outside [0,1] at ({where(idx, names)})"
        for idx in np.argwhere((table < -ROW_TOL) | (table > 1 + ROW_TOL))
    ]
    sums = table.sum(axis=-1)
    for idx in np.argwhere(np.abs(sums - 1.0) > ROW_TOL):
        errs.append(f"row sum {sums[tuple(idx)]:.12g} at ({where(idx, index_names)})")
    return errs


def validate(mdp: FactoredMDP) -> list[str]:
    """Return every invariant violation of ``mdp``; an empty list means valid."""
    errors = []
    if not (0.0 < mdp.gamma < 1.0):
        errors.append("discount must lie in (0,1)")
    for n in range(mdp.n_agents):
        errors.extend(_row_errors(mdp.kernels[n], f"agent {n}", ("s", "a"), "s'"))
        if not np.all(np.isfinite(mdp.rewards[n])):
            errors.append(f"non-finite reward for agent {n}")
    return errors


def validate_policy(mdp: FactoredMDP, policy: Policy) -> list[str]:
    errors = []
    if policy.n_states != mdp.n_states:
        errors.append(f"policy covers {policy.n_states} states, MDP has {mdp.n_states}")
    if tuple(policy.action_sizes) != mdp.action_sizes:
        errors.append(f"policy action sizes {policy.action_sizes} != MDP action sizes {mdp.action_sizes}")
    if errors:
        return errors
    return policy.errors()


def _require(mdp: FactoredMDP, policy: Policy | None = None) -> None:
    mdp.require_valid()
    if policy is not None:
        errs = validate_policy(mdp, policy)
        if errs:
            raise InvalidMDPError(errs)


def is_distribution(p: np.ndarray, tol: float = ROW_TOL) -> bool:
    p = np.asarray(p, dtype=float)
    return p.ndim == 1 and bool(np.all(p >= 0)) and abs(p.sum() - 1.0) <= tol


def joint_transition(mdp: FactoredMDP, s: int, a: int, s_next: int) -> float:
    """``P(s' | s, a)`` as the product of the per-agent factors."""
    for name, value, bound in (("s", s, mdp.n_states), ("a", a, mdp.n_actions), ("s'", s_next, mdp.n_states)):
        if not 0 <= value < bound:
            raise IndexError(f"{name}={value} out of range [0, {bound})")
    acts = mdp.action_grid[a]
    subs = mdp.state_grid[s_next]
    return math.prod(float(mdp.kernels[n][s, acts[n], subs[n]]) for n in range(mdp.n_agents))


def induced_chain(mdp: FactoredMDP, policy: Policy) -> np.ndarray:
    """State-to-state kernel ``P_pi(s' | s)`` of ``mdp`` run under ``policy``."""
    if isinstance(policy, FactoredPolicy):
        # agents move independently given s, so each factor is averaged on its own
        out = np.ones((mdp.n_states, 1))
        for n in range(mdp.n_agents):
            q = np.einsum("sa,sat->st", policy.tables[n], mdp.kernels[n])
            out = (out[:, :, None] * q[:, None, :]).reshape(mdp.n_states, -1)
        return out
    return np.einsum("sa,sat->st", policy.matrix, mdp.transition_tensor)


def expected_reward(mdp: FactoredMDP, policy: Policy) -> np.ndarray:
    """``r_pi(s) = sum_a pi(a|s) r(s, a)``."""
    if isinstance(policy, FactoredPolicy):
        return sum((policy.tables[n] * mdp.rewards[n]).sum(axis=1) for n in range(mdp.n_agents))
    return (policy.matrix * mdp.reward_matrix).sum(axis=1)


def chain_period(chain: np.ndarray) -> int:
    """Period of an irreducible chain via BFS levels from state 0."""
    adj = chain > 0
    n = chain.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(int(v))
        frontier = nxt
    g = 0
    for u, v in np.argwhere(adj):
        g = math.gcd(g, int(level[u] + 1 - level[v]))
    return g


def check_ergodic(chain: np.ndarray) -> None:
    """Raise :class:`NonErgodicError` unless ``chain`` is irreducible and aperiodic."""
    from scipy.sparse.csgraph import connected_components

    n_comp, _ = connected_components(chain > 0, directed=True, connection="strong")
    if n_comp != 1:
        raise NonErgodicError(f"chain is reducible ({n_comp} strongly connected components)")
    period = chain_period(chain)
    if period != 1:
        raise NonErgodicError(f"chain is periodic (period {period})")


def chain_stationary(chain: np.ndarray, tol: float = 1e-13, max_iter: int = 10**7) -> np.ndarray:
    """Stationary distribution of an ergodic chain by power iteration."""
    check_ergodic(chain)
    n = chain.shape[0]
    mu = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = mu @ chain
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - mu)) <= tol:
            return nxt
        mu = nxt
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")


def stationary_distribution(mdp: FactoredMDP, policy: Policy) -> np.ndarray:
    """Stationary distribution over joint states of ``mdp`` under ``policy``."""
    _require(mdp, policy)
    return chain_stationary(induced_chain(mdp, policy))


def bellman_expectation(mdp: FactoredMDP, policy: Policy, values: np.ndarray) -> np.ndarray:
    return expected_reward(mdp, policy) + mdp.gamma * induced_chain(mdp, policy) @ values


def exact_value(mdp: FactoredMDP, policy: Policy) -> np.ndarray:
    """Infinite-horizon value ``V = (I - gamma P_pi)^{-1} r_pi``."""
    _require(mdp, policy)
    chain = induced_chain(mdp, policy)
    r = expected_reward(mdp, policy)
    if mdp.n_states <= DENSE_SOLVE_LIMIT:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * chain, r)
    v = np.zeros(mdp.n_states)
    while True:
        nxt = r + mdp.gamma * chain @ v
        if np.max(np.abs(nxt - v)) <= 1e-10:
            return nxt
        v = nxt


def finite_horizon_value(mdp: FactoredMDP, policy: Policy, horizon: int) -> np.ndarray:
    """``V_H`` from ``H`` Bellman expectation backups starting at zero.

    ``horizon == 0`` gives the zero table.
    """
    _require(mdp, policy)
    chain = induced_chain(mdp, policy)
    r = expected_reward(mdp, policy)
    v = np.zeros(mdp.n_states)
    for _ in range(int(horizon)):
        v = r + mdp.gamma * chain @ v
    return v


def finite_horizon_q(mdp: FactoredMDP, policy: Policy, horizon: int) -> np.ndarray:
    """Horizon-indexed Q tables, shape ``(horizon + 1, S, A)``; ``Q[h]`` has ``h`` steps to go."""
    _require(mdp, policy)
    T, R, pm = mdp.transition_tensor, mdp.reward_matrix, policy.matrix
    q = np.zeros((horizon + 1, mdp.n_states, mdp.n_actions))
    v = np.zeros(mdp.n_states)
    for h in range(1, horizon + 1):
        q[h] = R + mdp.gamma * T @ v
        v = (pm * q[h]).sum(axis=1)
    return q


def greedy_actions(q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Per-row argmax, resolving near-ties toward the lowest index."""
    best = q.max(axis=1, keepdims=True)
    scale = max(1.0, float(np.max(np.abs(q))))
    return np.argmax(q >= best - tol * scale, axis=1)


def deterministic_policy(mdp_or_sizes, joint_actions: np.ndarray) -> FactoredPolicy:
    """Factored one-hot policy playing ``joint_actions[s]`` in each state."""
    sizes = mdp_or_sizes.action_sizes if hasattr(mdp_or_sizes, "action_sizes") else tuple(mdp_or_sizes)
    digits = index_grid(sizes)[np.asarray(joint_actions)]
    tables = []
    for n, k in enumerate(sizes):
        t = np.zeros((len(joint_actions), k))
        t[np.arange(len(joint_actions)), digits[:, n]] = 1.0
        tables.append(t)
    return FactoredPolicy(tuple(tables))


def optimal_q(mdp: FactoredMDP, tol: float = 1e-10) -> np.ndarray:
    """Optimal Q table by value iteration, stopped on the span of the update."""
    _require(mdp)
    T, R = mdp.transition_tensor, mdp.reward_matrix
    v = np.zeros(mdp.n_states)
    while True:
        q = R + mdp.gamma * T @ v
        nxt = q.max(axis=1)
        diff = nxt - v
        v = nxt
        if diff.max() - diff.min() <= tol:
            return R + mdp.gamma * T @ v


def optimal_policy(mdp: FactoredMDP) -> FactoredPolicy:
    """Deterministic optimal policy; ties go to the lowest joint action index.

    Value iteration is followed by policy-iteration sweeps on exact values
    until the greedy choice is stable.
    """
    actions = greedy_actions(optimal_q(mdp))
    T, R = mdp.transition_tensor, mdp.reward_matrix
    for _ in range(100):
        policy = deterministic_policy(mdp, actions)
        v = exact_value(mdp, policy)
        q = R + mdp.gamma * T @ v
        current = q[np.arange(mdp.n_states), actions]
        better = q.max(axis=1) > current + 1e-12 * max(1.0, float(np.max(np.abs(q))))
        if not better.any():
            return policy
        actions = np.where(better, greedy_actions(q), actions)
    return deterministic_policy(mdp, actions)


def uniform_policy(n_states: int, action_sizes: Sequence[int]) -> FactoredPolicy:
    return FactoredPolicy(tuple(np.full((n_states, k), 1.0 / k) for k in action_sizes))


def epsilon_soft(policy: FactoredPolicy, eps: float) -> FactoredPolicy:
    """Mix each agent factor with its uniform distribution: ``(1-eps) pi_n + eps/|A_n|``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    return FactoredPolicy(tuple((1.0 - eps) * t + eps / t.shape[1] for t in policy.tables))


def random_policy(rng: np.random.Generator, n_states: int, action_sizes: Sequence[int], concentration: float = 1.0) -> FactoredPolicy:
    return FactoredPolicy(tuple(rng.dirichlet(np.full(k, concentration), size=n_states) for k in action_sizes))


def random_mdp(
    rng: np.random.Generator,
    state_sizes: Sequence[int],
    action_sizes: Sequence[int],
    gamma: float = 0.9,
    concentration: float = 1.0,
    local_rewards: bool = False,
) -> FactoredMDP:
    """Random dense instance; Dirichlet kernel rows keep every chain ergodic."""
    S = int(np.prod(state_sizes))
    kernels = tuple(rng.dirichlet(np.full(k, concentration), size=(S, a)) for k, a in zip(state_sizes, action_sizes))
    if local_rewards:
        rewards = tuple(rng.random((k, a)) for k, a in zip(state_sizes, action_sizes))
    else:
        rewards = tuple(rng.random((S, a)) for a in action_sizes)
    return FactoredMDP(tuple(state_sizes), tuple(action_sizes), kernels, rewards, gamma)

