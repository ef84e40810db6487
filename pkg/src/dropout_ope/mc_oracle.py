"""Ground-truth evaluation on the post-dropout MDP, by exact solve or simulation.

Monte Carlo runs use the same counter-based child streams as dataset
generation, one stream per trajectory, so results do not depend on chunking
or on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mdp_core import FactoredMDP, Policy, _require, exact_value, finite_horizon_value, stationary_distribution
from .trajectories import Sampler, child_rng

CURVE_COLUMNS = ("H_prime", "mc_mean", "mc_stderr")


def default_start(mdp: FactoredMDP, policy: Policy) -> int:
    """Most likely state under the stationary distribution of ``policy`` (lowest index on ties)."""
    return int(np.argmax(stationary_distribution(mdp, policy)))


@dataclass(frozen=True)
class ConvergenceCurve:
    horizons: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    start: int
    n_traj: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for h, m, e in zip(self.horizons, self.means, self.stderrs):
            w.writerow((int(h), repr(float(m)), repr(float(e))))
        return buf.getvalue()

    def crossing(self, lower: float, upper: float) -> Optional[int]:
        """Smallest grid horizon whose mean lies in ``[lower, upper]``; ``None`` if never."""
        inside = (self.means >= lower) & (self.means <= upper)
        return int(self.horizons[np.argmax(inside)]) if inside.any() else None


def _partial_returns(sampler: Sampler, seed: int, indices: Sequence[int], start: int, gamma: float, grid: np.ndarray) -> np.ndarray:
    """Discounted partial sums at each grid horizon, shape ``(len(indices), len(grid))``."""
    length = int(grid[-1])
    steps = np.empty((len(indices), length, 2))
    for j, i in enumerate(indices):
        rng = child_rng(seed, i)
        rng.random()  # the initial-state draw, unused with a fixed start
        steps[j] = rng.random((length, 2))
    _, _, rewards = sampler.run(np.zeros(len(indices)), steps, np.full(len(indices), start))
    totals = np.cumsum(rewards * gamma ** np.arange(length), axis=1)
    return totals[:, grid - 1]


def convergence_curve(
    post_mdp: FactoredMDP,
    phi: Policy,
    n_traj: int,
    horizon_grid: Sequence[int],
    seed: int = 0,
    start: Optional[int] = None,
    n_jobs: int = 1,
    chunk: int = 512,
) -> ConvergenceCurve:
    """MC means of the discounted return truncated at each grid horizon.

    One set of ``n_traj`` trajectories of length ``max(grid)`` is simulated;
    every grid point reads a prefix of it.
    """
    _require(post_mdp, phi)
    grid = np.asarray(sorted(set(int(h) for h in horizon_grid)), dtype=np.int64)
    if grid.size == 0 or list(grid) != [int(h) for h in horizon_grid]:
        raise ValueError("horizon grid must be nonempty and strictly increasing")
    if grid[0] < 1:
        raise ValueError("horizons must be at least 1")
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    start = default_start(post_mdp, phi) if start is None else int(start)
    init = np.zeros(post_mdp.n_states)
    init[start] = 1.0
    sampler = Sampler.build(post_mdp, phi, init)
    blocks = [range(i, min(i + chunk, n_traj)) for i in range(0, n_traj, chunk)]
    args = (post_mdp.gamma, grid)
    if n_jobs > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_partial_returns, sampler, seed, list(b), start, *args) for b in blocks]
            parts = [f.result() for f in futures]
    else:
        parts = [_partial_returns(sampler, seed, list(b), start, *args) for b in blocks]
    returns = np.concatenate(parts)
    means = np.array([math.fsum(col) / n_traj for col in returns.T.tolist()])
    if n_traj > 1:
        sq = np.array([math.fsum(col) for col in ((returns - means) ** 2).T.tolist()])
        stderrs = np.sqrt(sq / (n_traj - 1) / n_traj)
    else:
        stderrs = np.full(grid.size, np.nan)
    return ConvergenceCurve(grid, means, stderrs, start, n_traj)


def mc_evaluate(
    post_mdp: FactoredMDP,
    phi: Policy,
    n_traj: int,
    horizon: int,
    seed: int = 0,
    start: Optional[int] = None,
    n_jobs: int = 1,
) -> tuple:
    """``(mean, standard error)`` of the discounted ``horizon``-step return from ``start``."""
    c = convergence_curve(post_mdp, phi, n_traj, [horizon], seed, start, n_jobs)
    return float(c.means[0]), float(c.stderrs[0])


def exact_post_value(post_mdp: FactoredMDP, phi: Policy, horizon: Optional[int] = None) -> np.ndarray:
    """Exact infinite-horizon (or ``horizon``-step) value of ``phi`` on the post-dropout MDP."""
    if horizon is None:
        return exact_value(post_mdp, phi)
    return finite_horizon_value(post_mdp, phi, horizon)
