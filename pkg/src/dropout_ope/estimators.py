"""Importance-sampling evaluation of post-dropout policies from pre-dropout data.

A candidate ``phi`` for the post-dropout system is augmented with the dropped
agent's behavior factor, giving ``phi'`` on the full system.  Logged steps are
reweighted by ``rho_t = phi'(a_t | s_t) / pi(a_t | s_t)`` and scored with the
post-dropout reward ``r_bar(s_bar_t, a_bar_t)``.  Per-state value estimates
on the full system are finally averaged over the dropped substate with an
empirical stationary distribution (the "dagger" estimate).

Time is 0-based throughout: step ``t`` of a length-``L`` slice is discounted
by ``gamma**t`` and ``Q[h]`` denotes a Q table with ``h`` steps to go.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dropout import DropoutIndex, DropoutSpec, augment_policy, build_post_dropout
from .mdp_core import FactoredMDP, FactoredPolicy, Policy
from .trajectories import Dataset, child_rng, empirical_occupancy, empirical_stationary

KINDS = ("is", "step-is", "wis", "step-wis", "dr")
SPLIT_STREAM = 2**32 - 1


class SupportError(ValueError):
    """The target policy puts mass where the behavior policy has none."""


@dataclass(frozen=True, eq=False)
class OffPolicyProblem:
    """Joint-index tables for reweighting logged steps toward a target policy.

    ``behavior`` and ``target`` are ``(S, A)`` action distributions on the
    full system and ``reward`` is the transformed reward lifted to full
    ``(s, a)`` pairs.
    """

    gamma: float
    behavior: np.ndarray
    target: np.ndarray
    reward: np.ndarray

    @property
    def n_states(self) -> int:
        return self.behavior.shape[0]

    @property
    def n_actions(self) -> int:
        return self.behavior.shape[1]

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))


def post_reward_matrix(mdp: FactoredMDP, spec: DropoutSpec, post: Optional[FactoredMDP] = None) -> np.ndarray:
    """``r_bar(s_bar, a_bar)`` for the dropout spec's reward mode, shape ``(S_bar, A_bar)``."""
    if post is None:
        if spec.reward_mode == "refreshed":
            idx = DropoutIndex.of(mdp, spec.dropped_agent)
            dummy = tuple(np.zeros((idx.n_post_states, a, s)) for a, s in zip(idx.post_action_sizes, idx.post_state_sizes))
            post = FactoredMDP(idx.post_state_sizes, idx.post_action_sizes, dummy, spec.refreshed_rewards, mdp.gamma)
        else:
            post = build_post_dropout(mdp, spec)
    return np.asarray(post.reward_matrix)


def transformed_problem(mdp: FactoredMDP, spec: DropoutSpec, phi: Policy, post_reward: Optional[np.ndarray] = None) -> OffPolicyProblem:
    """Pair the behavior policy with ``phi`` augmented by the dropped agent's factor."""
    idx = DropoutIndex.of(mdp, spec.dropped_agent)
    if post_reward is None:
        post_reward = post_reward_matrix(mdp, spec)
    lifted = np.asarray(post_reward)[idx.post_state][:, idx.post_action]
    phi_prime = augment_policy(mdp, phi, spec.behavior_policy.tables[spec.dropped_agent], spec.dropped_agent)
    return OffPolicyProblem(mdp.gamma, np.asarray(spec.behavior_policy.matrix), np.asarray(phi_prime.matrix), lifted)


def transformed_value(mdp: FactoredMDP, problem: OffPolicyProblem, horizon: Optional[int] = None) -> np.ndarray:
    """Exact value of ``problem.target`` under the lifted reward on the full system.

    With ``horizon`` set, the ``horizon``-step truncated value (what the IS
    estimators are unbiased for); otherwise the infinite-horizon value.
    The lifted reward is not additive over agents, so this works on joint tables.
    """
    P = mdp.transition_tensor
    r_pi = (problem.target * problem.reward).sum(axis=1)
    chain = np.einsum("sa,sat->st", problem.target, P)
    if horizon is None:
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * chain, r_pi)
    v = np.zeros(mdp.n_states)
    for _ in range(int(horizon)):
        v = r_pi + mdp.gamma * chain @ v
    return v


def check_support(target: np.ndarray, behavior: np.ndarray) -> list:
    """Every ``(s, a)`` with ``target > 0`` and ``behavior == 0`` over the full tables."""
    return [(int(s), int(a)) for s, a in np.argwhere((np.asarray(target) > 0) & (np.asarray(behavior) <= 0))]


@dataclass(frozen=True, eq=False)
class Batch:
    """Equal-length slices of logged steps, ready for reweighting.

    ``states`` has one more column than the step arrays (the final next state).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    ratios: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def cumulative_ratios(self) -> np.ndarray:
        return np.cumprod(self.ratios, axis=1)

    def discounts(self, gamma: float) -> np.ndarray:
        return gamma ** np.arange(self.horizon)

    def returns(self, gamma: float) -> np.ndarray:
        """Transformed discounted return of each slice."""
        return self.rewards @ self.discounts(gamma)


def make_batch(problem: OffPolicyProblem, states: np.ndarray, actions: np.ndarray, labels: Optional[Sequence] = None) -> Batch:
    """Attach transformed rewards and importance ratios to logged slices.

    ``labels[i]`` (trajectory id, start time) is used in support errors.
    """
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    s = states[:, :-1]
    behavior = problem.behavior[s, actions]
    if np.any(behavior <= 0):
        i, t = (int(x) for x in np.argwhere(behavior <= 0)[0])
        traj, start = labels[i] if labels is not None else (i, 0)
        raise SupportError(
            f"logged action a={int(actions[i, t])} at s={int(s[i, t])} has zero behavior probability "
            f"(trajectory {traj}, t={start + t})"
        )
    ratios = problem.target[s, actions] / behavior
    return Batch(states, actions, problem.reward[s, actions], ratios)


def trajectory_batch(problem: OffPolicyProblem, dataset: Dataset, indices: Optional[Sequence[int]] = None) -> Batch:
    """All non-reserved trajectories (or a subset) from their first step."""
    states, actions, _ = dataset.stacked(indices)
    ids = range(len(actions)) if indices is None else indices
    return make_batch(problem, states, actions, [(i, 0) for i in ids])


def first_visit_batch(
    problem: OffPolicyProblem,
    states: np.ndarray,
    actions: np.ndarray,
    state: int,
    min_horizon: int,
    traj_ids: Optional[Sequence[int]] = None,
) -> Batch:
    """Length-``min_horizon`` slices starting at each trajectory's first visit to ``state``.

    Trajectories whose first visit leaves fewer than ``min_horizon`` steps are skipped.
    """
    if min_horizon < 1:
        raise ValueError("min_horizon must be at least 1")
    length = actions.shape[1]
    hits = states[:, :length] == state
    first = np.argmax(hits, axis=1)
    keep = np.flatnonzero(hits.any(axis=1) & (length - first >= min_horizon))
    offsets = first[keep][:, None] + np.arange(min_horizon + 1)
    rows = keep[:, None]
    ids = np.arange(len(actions)) if traj_ids is None else np.asarray(traj_ids)
    labels = [(int(ids[i]), int(first[i])) for i in keep]
    return make_batch(problem, states[rows, offsets], actions[rows, offsets[:, :-1]], labels)


def first_visit_returns(dataset: Dataset, problem: OffPolicyProblem, state: int, min_horizon: int) -> list:
    """``(transformed return, ratio sequence)`` for each qualifying first-visit slice."""
    states, actions, _ = dataset.stacked()
    batch = first_visit_batch(problem, states, actions, state, min_horizon)
    returns = batch.returns(problem.gamma)
    return [(float(returns[i]), batch.ratios[i].copy()) for i in range(len(batch))]


def fsum_mean(x: np.ndarray) -> float:
    return math.fsum(np.asarray(x, dtype=float).tolist()) / len(x)


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float).tolist()
    sq = math.fsum(x * x for x in w)
    return math.fsum(w) ** 2 / sq if sq > 0 else 0.0


@dataclass
class EstimateReport:
    """Point estimate of one estimator plus the bookkeeping the interval needs.

    ``b_is`` is ``None`` when the estimator's bias bound is unknown.
    """

    kind: str
    estimate: float
    n_used: int
    horizon: int
    mu_horizon: Optional[int] = None
    b_is: Optional[float] = 0.0
    ess: float = float("nan")
    max_ratio: float = float("nan")
    std_err: float = float("nan")
    extra: dict = field(default_factory=dict)

    FIELDS = ("kind", "estimate", "n_used", "horizon", "mu_horizon", "b_is", "ess", "max_ratio", "std_err")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.FIELDS}
        d["b_is"] = "unknown" if self.b_is is None else self.b_is
        d.update(self.extra)
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values())


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _report(kind: str, batch: Batch, estimate: float, per_traj: Optional[np.ndarray], b_is: Optional[float]) -> EstimateReport:
    final = batch.cumulative_ratios[:, -1] if batch.horizon else np.ones(len(batch))
    se = float(np.std(per_traj, ddof=1) / math.sqrt(len(per_traj))) if per_traj is not None and len(per_traj) > 1 else float("nan")
    return EstimateReport(
        kind=kind,
        estimate=float(estimate),
        n_used=len(batch),
        horizon=batch.horizon,
        b_is=b_is,
        ess=effective_sample_size(final),
        max_ratio=float(final.max()) if len(final) else float("nan"),
        std_err=se,
    )


def is_values(batch: Batch, gamma: float, stepwise: bool = False) -> np.ndarray:
    """Per-slice IS estimates: ``rho_{1:H} R(G_H)`` or ``sum_t gamma^t rho_{1:t} r_t``."""
    disc = batch.discounts(gamma)
    if stepwise:
        return (batch.cumulative_ratios * batch.rewards) @ disc
    return batch.cumulative_ratios[:, -1] * (batch.rewards @ disc)


def estimate_is(batch: Batch, gamma: float, stepwise: bool = False) -> EstimateReport:
    """Trajectory-wise (or step-wise) importance sampling; unbiased, so ``b_is = 0``."""
    if len(batch) == 0:
        raise ValueError("no trajectories to estimate from")
    vals = is_values(batch, gamma, stepwise)
    return _report("step-is" if stepwise else "is", batch, fsum_mean(vals), vals, 0.0)


def estimate_step_is(batch: Batch, gamma: float) -> EstimateReport:
    return estimate_is(batch, gamma, stepwise=True)


def estimate_wis(batch: Batch, gamma: float, stepwise: bool = False) -> EstimateReport:
    """Self-normalized importance sampling; its bias bound is reported as unknown."""
    if len(batch) == 0:
        raise ValueError("no trajectories to estimate from")
    cum = batch.cumulative_ratios
    disc = batch.discounts(gamma)
    if stepwise:
        totals = np.array([math.fsum(col) for col in cum.T.tolist()])
        if np.any(totals <= 0):
            raise ValueError("all cumulative importance weights are zero at some step")
        per_step = np.array([math.fsum(col) for col in (cum * batch.rewards).T.tolist()]) / totals
        value = math.fsum((per_step * disc).tolist())
    else:
        w = cum[:, -1]
        total = math.fsum(w.tolist())
        if total <= 0:
            raise ValueError("all importance weights are zero")
        value = math.fsum((w * (batch.rewards @ disc)).tolist()) / total
    return _report("step-wis" if stepwise else "wis", batch, value, None, None)


def estimate_step_wis(batch: Batch, gamma: float) -> EstimateReport:
    return estimate_wis(batch, gamma, stepwise=True)


@dataclass(frozen=True, eq=False)
class FittedQ:
    """Horizon-indexed Q tables ``q[h]`` (``h`` steps to go) from a count-based model."""

    q: np.ndarray
    n_unvisited: int = 0


def fit_qhat(batch: Batch, target: np.ndarray, gamma: float, horizon: int, n_states: int, n_actions: int) -> FittedQ:
    """Count-based model of the split, then ``horizon`` backward-induction steps for ``target``.

    Unvisited ``(s, a)`` get a uniform next-state row and zero reward.
    """
    if len(batch) == 0:
        raise ValueError("empty split: cannot fit a model")
    s = batch.states[:, :-1].ravel()
    a = batch.actions.ravel()
    s2 = batch.states[:, 1:].ravel()
    pair = s * n_actions + a
    counts = np.bincount(pair * n_states + s2, minlength=n_states * n_actions * n_states).reshape(n_states, n_actions, n_states).astype(float)
    visits = counts.sum(axis=2)
    reward_sum = np.bincount(pair, weights=batch.rewards.ravel(), minlength=n_states * n_actions).reshape(n_states, n_actions)
    seen = visits > 0
    kernel = np.where(seen[:, :, None], counts / np.maximum(visits, 1)[:, :, None], 1.0 / n_states)
    reward = np.where(seen, reward_sum / np.maximum(visits, 1), 0.0)
    q = np.zeros((horizon + 1, n_states, n_actions))
    v = np.zeros(n_states)
    for h in range(1, horizon + 1):
        q[h] = reward + gamma * kernel @ v
        v = (target * q[h]).sum(axis=1)
    return FittedQ(q, int((~seen).sum()))


def dr_values(batch: Batch, gamma: float, qhat, target: np.ndarray) -> np.ndarray:
    """Per-slice doubly robust estimates by the backward recursion.

    ``U <- V_hat(s_t) + rho_t (r_t + gamma U - Q_hat(s_t, a_t))`` from the last
    step to the first, with ``V_hat(s) = sum_a target(a|s) Q_hat(s, a)``.
    ``qhat`` is a :class:`FittedQ`, an ``(H+1, S, A)`` array, or a single
    ``(S, A)`` table used at every step.
    """
    q = qhat.q if isinstance(qhat, FittedQ) else np.asarray(qhat, dtype=float)
    length = batch.horizon
    if q.ndim == 3 and q.shape[0] < length + 1:
        raise ValueError(f"Q table covers {q.shape[0] - 1} steps, slices have {length}")
    u = np.zeros(len(batch))
    rows = np.arange(len(batch))
    for t in range(length - 1, -1, -1):
        qt = q[length - t] if q.ndim == 3 else q
        s = batch.states[:, t]
        a = batch.actions[:, t]
        v_hat = (target[s] * qt[s]).sum(axis=1)
        u = v_hat + batch.ratios[:, t] * (batch.rewards[:, t] + gamma * u - qt[s, a])
    del rows
    return u


def estimate_dr(batch: Batch, gamma: float, qhat, target: np.ndarray) -> EstimateReport:
    """Doubly robust estimate; unbiased for a ``qhat`` fitted on independent data."""
    if len(batch) == 0:
        raise ValueError("no trajectories to estimate from")
    vals = dr_values(batch, gamma, qhat, target)
    return _report("dr", batch, fsum_mean(vals), vals, 0.0)


def run_estimator(kind: str, batch: Batch, problem: OffPolicyProblem, qhat=None) -> EstimateReport:
    if kind == "is":
        return estimate_is(batch, problem.gamma)
    if kind == "step-is":
        return estimate_is(batch, problem.gamma, stepwise=True)
    if kind == "wis":
        return estimate_wis(batch, problem.gamma)
    if kind == "step-wis":
        return estimate_wis(batch, problem.gamma, stepwise=True)
    if kind == "dr":
        if qhat is None:
            raise ValueError("the doubly robust estimator needs a fitted Q model")
        return estimate_dr(batch, problem.gamma, qhat, problem.target)
    raise ValueError(f"unknown estimator {kind!r}; choose from {KINDS}")


def per_slice_values(kind: str, batch: Batch, problem: OffPolicyProblem, qhat=None) -> np.ndarray:
    """Per-slice estimates whose mean is the estimator (self-normalized kinds use their IS counterpart)."""
    if kind in ("is", "wis"):
        return is_values(batch, problem.gamma)
    if kind in ("step-is", "step-wis"):
        return is_values(batch, problem.gamma, stepwise=True)
    if kind == "dr":
        return dr_values(batch, problem.gamma, qhat, problem.target)
    raise ValueError(f"unknown estimator {kind!r}")


def marginalize_estimate(v_hat: np.ndarray, pi_dropped: np.ndarray, mu_hat: np.ndarray, index: DropoutIndex) -> np.ndarray:
    """Average full-system values over the dropped substate.

    Computes ``sum_{a_N} sum_{s_N} V(s) pi(a_N | s) mu_hat(s_N)`` and the
    reduced ``sum_{s_N} V(s) mu_hat(s_N)``; ``V`` carries no ``a_N``
    argument, so the two agree and a mismatch raises.  ``mu_hat`` is a
    distribution over ``S_N`` or an ``(S_bar, S_N)`` table of per-state weights.
    """
    v_hat = np.asarray(v_hat, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if v_hat.shape != (index.full_state.size,):
        raise ValueError(f"value table has shape {v_hat.shape}, expected ({index.full_state.size},)")
    if mu_hat.ndim == 1:
        if mu_hat.shape != (index.n_dropped_states,):
            raise ValueError(f"mu_hat has shape {mu_hat.shape}")
        mu_hat = np.broadcast_to(mu_hat, index.full_state.shape)
    elif mu_hat.shape != index.full_state.shape:
        raise ValueError(f"mu_hat has shape {mu_hat.shape}")
    per_pair = v_hat[index.full_state]
    pi = np.asarray(pi_dropped)[index.full_state]
    with np.errstate(invalid="ignore"):
        reduced = np.where(mu_hat > 0, per_pair * mu_hat, 0.0).sum(axis=1)
        full = np.where(mu_hat[..., None] > 0, per_pair[..., None] * pi * mu_hat[..., None], 0.0).sum(axis=(1, 2))
    if not np.allclose(full, reduced, rtol=1e-12, atol=1e-12, equal_nan=True):
        raise ArithmeticError("action-summed and reduced marginalizations disagree")
    return reduced


@dataclass
class DaggerEstimate:
    """Per-state estimates on both systems and everything the interval needs."""

    kind: str
    values: np.ndarray
    full_values: np.ndarray
    counts: np.ndarray
    post_counts: np.ndarray
    mu_hat: np.ndarray
    min_horizon: int
    mu_horizon: int
    b_is: Optional[float]
    fit_size: int = 0
    n_unvisited: int = 0
    std_err: Optional[np.ndarray] = None


def split_indices(n: int, fraction: float, seed: int) -> tuple:
    """Seeded shuffle of ``range(n)``; the first ``round(fraction * n)`` go to the fit split."""
    order = child_rng(seed, SPLIT_STREAM).permutation(n)
    k = int(round(fraction * n))
    if fraction > 0 and n >= 2:
        k = min(max(k, 1), n - 1)
    return np.sort(order[:k]), np.sort(order[k:])


def dagger_estimate(
    dataset: Dataset,
    problem: OffPolicyProblem,
    index: DropoutIndex,
    kind: str = "dr",
    min_horizon: Optional[int] = None,
    fit_fraction: float = 0.2,
    split_seed: int = 0,
    mu_weights: str = "marginal",
    qhat: Optional[FittedQ] = None,
) -> DaggerEstimate:
    """Per-state first-visit estimates of ``phi'`` marginalized with the reserved trajectory.

    ``mu_weights="marginal"`` averages with the dropped agent's empirical
    marginal; ``"conditional"`` uses empirical ``mu_hat(s_N | s_bar)`` from the
    same trajectory.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown estimator {kind!r}; choose from {KINDS}")
    states, actions, _ = dataset.stacked()
    n_is = len(actions)
    if n_is == 0:
        raise ValueError("dataset has no trajectories besides the reserved one")
    horizon = actions.shape[1]
    min_horizon = horizon if min_horizon is None else int(min_horizon)

    ids = np.arange(n_is)
    fit_size = 0
    n_unvisited = 0
    if kind == "dr" and qhat is None:
        fit_ids, ids = split_indices(n_is, fit_fraction, split_seed)
        fit = make_batch(problem, states[fit_ids], actions[fit_ids], [(int(i), 0) for i in fit_ids])
        qhat = fit_qhat(fit, problem.target, problem.gamma, min_horizon, problem.n_states, problem.n_actions)
        fit_size, n_unvisited = len(fit_ids), qhat.n_unvisited
    ev_states, ev_actions = states[ids], actions[ids]

    full = np.full(problem.n_states, np.nan)
    se = np.full(problem.n_states, np.nan)
    counts = np.zeros(problem.n_states, dtype=int)
    for s in range(problem.n_states):
        batch = first_visit_batch(problem, ev_states, ev_actions, s, min_horizon, ids)
        counts[s] = len(batch)
        if len(batch) == 0:
            continue
        rep = run_estimator(kind, batch, problem, qhat)
        full[s] = rep.estimate
        se[s] = rep.std_err

    mu_traj = dataset.mu_trajectory
    if mu_weights == "conditional":
        occ = empirical_occupancy(mu_traj, problem.n_states)[index.full_state]
        tot = occ.sum(axis=1, keepdims=True)
        mu_hat = np.where(tot > 0, occ / np.where(tot > 0, tot, 1), 1.0 / index.n_dropped_states)
        weights = mu_hat
    else:
        mu_hat = empirical_stationary(mu_traj, index.dropped, index.state_sizes)
        weights = np.broadcast_to(mu_hat, index.full_state.shape)
    pi_dropped = _dropped_factor(problem, index)
    values = marginalize_estimate(full, pi_dropped, mu_hat, index)
    # slices backing each post state: the fewest among the substates that carry weight
    post_counts = np.where(weights > 0, counts[index.full_state], np.iinfo(np.int64).max).min(axis=1)
    return DaggerEstimate(
        kind=kind,
        values=values,
        full_values=full,
        counts=counts,
        post_counts=post_counts,
        mu_hat=mu_hat,
        min_horizon=min_horizon,
        mu_horizon=len(mu_traj),
        b_is=None if kind in ("wis", "step-wis") else 0.0,
        fit_size=fit_size,
        n_unvisited=n_unvisited,
        std_err=se,
    )


def _dropped_factor(problem: OffPolicyProblem, index: DropoutIndex) -> np.ndarray:
    """Recover ``pi_N(a_N | s)`` from the joint behavior table."""
    out = np.zeros((problem.n_states, index.action_sizes[index.dropped]))
    np.add.at(out.T, index.dropped_action, problem.behavior.T)
    return out


def select_min_horizon(
    dataset: Dataset,
    problem: OffPolicyProblem,
    candidates: Sequence[int],
    holdout_fraction: float = 0.2,
    kind: str = "step-is",
    seed: int = 0,
    state: Optional[int] = None,
    qhat=None,
) -> int:
    """Cross-validated minimum first-visit horizon.

    Each candidate is scored on a held-out share of the trajectories by the
    squared truncation bound ``(gamma^H r_max / (1 - gamma))^2`` plus the
    estimator's variance (slice variance over slice count), averaged over
    start states with at least two slices.  Candidates with no such state
    are skipped; ties go to the smaller horizon.
    """
    if len(candidates) < 2:
        raise ValueError("need at least two candidate horizons")
    states, actions, _ = dataset.stacked()
    _, holdout = split_indices(len(actions), 1.0 - holdout_fraction, seed)
    if len(holdout) == 0:
        raise ValueError("holdout split is empty")
    hs, ha = states[holdout], actions[holdout]
    g, rmax = problem.gamma, problem.r_max
    if kind == "dr" and qhat is None:
        raise ValueError("the doubly robust estimator needs a fitted Q model")
    scores = {}
    for h in sorted(set(int(c) for c in candidates)):
        starts = range(problem.n_states) if state is None else [state]
        variances = []
        for s in starts:
            batch = first_visit_batch(problem, hs, ha, s, h, holdout)
            if len(batch) < 2:
                continue
            vals = per_slice_values(kind, batch, problem, qhat)
            variances.append(float(np.var(vals, ddof=1)) / len(vals))
        if not variances:
            continue
        scores[h] = (g**h * rmax / (1 - g)) ** 2 + math.fsum(variances) / len(variances)
    if not scores:
        raise ValueError("every candidate horizon was skipped: too few usable holdout slices")
    best = min(scores.values())
    tol = 1e-9 * max(abs(best), 1e-300)
    return min(h for h, v in scores.items() if v <= best + tol)
