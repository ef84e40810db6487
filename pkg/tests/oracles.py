"""Brute-force reference computations used as test oracles.

Everything here is written with explicit loops over the raw per-agent tables
and deliberately avoids the package's vectorized helpers, so agreement is
evidence rather than tautology.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def digits(index, sizes):
    out = []
    for k in reversed(sizes):
        out.append(index % k)
        index //= k
    return tuple(reversed(out))


def joint(subs, sizes):
    idx = 0
    for d, k in zip(subs, sizes):
        idx = idx * k + d
    return idx


def joint_kernel(state_sizes, action_sizes, kernels):
    """``P[s, a, s']`` as the product of per-agent entries, by triple loop."""
    S, A = math.prod(state_sizes), math.prod(action_sizes)
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            acts = digits(a, action_sizes)
            for s2 in range(S):
                subs = digits(s2, state_sizes)
                p = 1.0
                for n in range(len(state_sizes)):
                    p *= kernels[n][s, acts[n], subs[n]]
                P[s, a, s2] = p
    return P


def joint_reward(state_sizes, action_sizes, rewards):
    """``R[s, a] = sum_n r_n(s, a_n)`` from joint-indexed per-agent tables."""
    S, A = math.prod(state_sizes), math.prod(action_sizes)
    R = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            acts = digits(a, action_sizes)
            R[s, a] = sum(rewards[n][s, acts[n]] for n in range(len(action_sizes)))
    return R


def joint_policy(action_sizes, tables):
    S = tables[0].shape[0]
    A = math.prod(action_sizes)
    pi = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            acts = digits(a, action_sizes)
            pi[s, a] = math.prod(tables[n][s, acts[n]] for n in range(len(action_sizes)))
    return pi


def value_by_iteration(P, R, pi, gamma, tol=1e-14):
    """Infinite-horizon value by plain fixed-point iteration."""
    S = P.shape[0]
    v = np.zeros(S)
    while True:
        nxt = np.array([sum(pi[s, a] * (R[s, a] + gamma * P[s, a] @ v) for a in range(P.shape[1])) for s in range(S)])
        if np.max(np.abs(nxt - v)) < tol:
            return nxt
        v = nxt


def value_by_enumeration(P, R, pi, gamma, horizon, s0):
    """``E[sum_{t<H} gamma^t r_t | s_0]`` by summing over every (s, a) path."""
    S, A = P.shape[:2]
    total = 0.0
    for path in itertools.product(range(A), range(S), repeat=horizon):
        prob, ret, s = 1.0, 0.0, s0
        for t in range(horizon):
            a, s2 = path[2 * t], path[2 * t + 1]
            prob *= pi[s, a] * P[s, a, s2]
            if prob == 0.0:
                break
            ret += gamma**t * R[s, a]
            s = s2
        else:
            total += prob * ret
    return total


def stationary_by_eig(chain):
    w, vecs = np.linalg.eig(np.asarray(chain).T)
    k = int(np.argmin(np.abs(w - 1.0)))
    v = np.real(vecs[:, k])
    return v / v.sum()


def best_deterministic_value(P, R, gamma):
    """Pointwise max of values over all deterministic joint policies."""
    S, A = P.shape[:2]
    best = np.full(S, -np.inf)
    for choice in itertools.product(range(A), repeat=S):
        Pp = np.array([P[s, choice[s]] for s in range(S)])
        r = np.array([R[s, choice[s]] for s in range(S)])
        v = np.linalg.solve(np.eye(S) - gamma * Pp, r)
        best = np.maximum(best, v)
    return best


def tv_to_stationary(chain, t):
    mu = stationary_by_eig(chain)
    Pt = np.linalg.matrix_power(np.asarray(chain), t)
    return max(0.5 * sum(abs(Pt[i, j] - mu[j]) for j in range(len(mu))) for i in range(len(mu)))


def trajectory_is(ratios, rewards, gamma):
    w = 1.0
    for r in ratios:
        w *= r
    return w * sum(gamma**t * x for t, x in enumerate(rewards))


def step_is(ratios, rewards, gamma):
    total, w = 0.0, 1.0
    for t, (r, x) in enumerate(zip(ratios, rewards)):
        w *= r
        total += gamma**t * w * x
    return total


def dr_expanded(ratios, rewards, q_taken, v_hat, gamma):
    """Non-recursive DR form: ``sum_t gamma^t [rho_{1:t} (r_t - Q_t) + rho_{1:t-1} V_t]``."""
    total, prev = 0.0, 1.0
    for t in range(len(ratios)):
        cur = prev * ratios[t]
        total += gamma**t * (cur * (rewards[t] - q_taken[t]) + prev * v_hat[t])
        prev = cur
    return total
