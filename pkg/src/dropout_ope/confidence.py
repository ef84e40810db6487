"""Mixing-time bounds and high-probability intervals for marginalized IS estimates.

The interval combines two Hoeffding-type tails: one for the empirical
stationary distribution of the dropped substate (driven by the reserved
trajectory of length ``H_mu`` and the chain's mixing time) and one for the
average over ``|D| - 1`` importance-sampled trajectories.  A deterministic
term ``eps' = gamma**H r_max / (1 - gamma) + B_IS`` covers horizon
truncation and estimator bias.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .mdp_core import NonErgodicError, chain_stationary, check_ergodic

SLEM_LIMIT = 1.0 - 1e-12
BISECT_RTOL = 1e-9


class UnknownBiasError(ValueError):
    """The estimator's bias bound is unknown, so no interval can be formed."""


@dataclass(frozen=True)
class BoundParams:
    """Inputs to the failure-probability bound.

    ``b_is=None`` marks an unknown bias bound (self-normalized estimators).
    """

    gamma: float
    r_max: float
    horizon: int
    mu_horizon: int
    n_traj: int
    t_mix: float
    s_n_size: int
    b_is: Optional[float] = 0.0

    def __post_init__(self):
        errors = []
        if not 0.0 < self.gamma < 1.0:
            errors.append("gamma must lie in (0,1)")
        if not self.r_max > 0 or not math.isfinite(self.r_max):
            errors.append("r_max must be positive and finite")
        if self.horizon < 1 or self.mu_horizon < 1:
            errors.append("horizon and mu_horizon must be at least 1")
        if self.n_traj < 2:
            errors.append("n_traj must be at least 2")
        if not self.t_mix >= 1:
            errors.append("t_mix must be at least 1")
        if self.s_n_size < 1:
            errors.append("s_n_size must be at least 1")
        if self.b_is is not None and not self.b_is >= 0:
            errors.append("b_is must be non-negative")
        if errors:
            raise ValueError("; ".join(errors))

    def known(self) -> "BoundParams":
        if self.b_is is None:
            raise UnknownBiasError("bias bound is unknown for this estimator; supply b_is explicitly")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


def second_eigenvalue_modulus(chain: np.ndarray) -> float:
    """Largest eigenvalue modulus after removing the unit eigenvalue."""
    eig = np.linalg.eigvals(np.asarray(chain, dtype=float))
    mods = np.sort(np.abs(eig))[::-1]
    return float(mods[1]) if len(mods) > 1 else 0.0


def mixing_time_bound(chain: np.ndarray, eps: float = 0.25) -> int:
    """``ceil(log(1 / (eps mu_min)) / (1 - lambda_star))`` for an ergodic chain.

    ``lambda_star`` is the second-largest eigenvalue modulus.  For reversible
    chains this is the standard relaxation-time bound; for others it is a
    heuristic that the tests check against exact TV decay.
    """
    chain = np.asarray(chain, dtype=float)
    check_ergodic(chain)
    lam = second_eigenvalue_modulus(chain)
    if lam >= SLEM_LIMIT:
        raise NonErgodicError(f"second eigenvalue modulus {lam!r} is numerically 1")
    mu_min = float(chain_stationary(chain).min())
    return max(1, math.ceil(math.log(1.0 / (eps * mu_min)) / (1.0 - lam)))


def tv_decay(chain: np.ndarray, t_max: int) -> np.ndarray:
    """``d(t) = max_s TV(P^t(s, .), mu)`` for ``t = 0..t_max`` by matrix powers."""
    chain = np.asarray(chain, dtype=float)
    mu = chain_stationary(chain)
    out = np.empty(t_max + 1)
    power = np.eye(chain.shape[0])
    for t in range(t_max + 1):
        out[t] = 0.5 * np.abs(power - mu).sum(axis=1).max()
        power = power @ chain
    return out


def exact_mixing_time(chain: np.ndarray, eps: float = 0.25, t_max: int = 100_000) -> int:
    """Smallest ``t`` with ``d(t) <= eps``, by repeated multiplication."""
    chain = np.asarray(chain, dtype=float)
    mu = chain_stationary(chain)
    power = np.eye(chain.shape[0])
    for t in range(t_max + 1):
        if 0.5 * np.abs(power - mu).sum(axis=1).max() <= eps:
            return t
        power = power @ chain
    raise RuntimeError(f"chain did not mix to {eps} within {t_max} steps")


def occupancy_tail(eps: float, horizon: int, t_mix: float) -> float:
    """``min(1, 2 exp(-eps^2 H / (4.5 t_mix)))``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return min(1.0, 2.0 * math.exp(-(eps**2) * horizon / (4.5 * t_mix)))


def bound_coefficients(params: BoundParams) -> tuple:
    """``(c_mu, c_is)`` with each tail equal to ``2 exp(-c delta^2)``."""
    p = params
    c_mu = (1 - p.gamma) ** 2 * p.mu_horizon / (
        9.0 * p.t_mix * (1 - p.gamma**p.mu_horizon) ** 2 * p.r_max**2 * p.s_n_size**2
    )
    c_is = (1 - p.gamma) ** 2 * (p.n_traj - 1) / (2.0 * (1 - p.gamma**p.horizon) ** 2 * p.r_max**2)
    return c_mu, c_is


def bound_terms(delta: float, params: BoundParams) -> tuple:
    """The two unclamped tail terms (substate marginalization, IS average)."""
    c_mu, c_is = bound_coefficients(params)
    return 2.0 * math.exp(-c_mu * delta**2), 2.0 * math.exp(-c_is * delta**2)


def failure_prob(delta: float, params: BoundParams) -> float:
    """Probability bound that the marginalized estimate misses by more than ``delta + eps'``."""
    params.known()
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return min(1.0, math.fsum(bound_terms(delta, params)))


def eps_prime(params: BoundParams) -> float:
    """Truncation plus bias: ``gamma^H r_max / (1 - gamma) + B_IS``."""
    p = params.known()
    return p.gamma**p.horizon * p.r_max / (1 - p.gamma) + p.b_is


@dataclass(frozen=True)
class Halfwidth:
    delta: float
    eps_prime: float
    split_delta: float

    @property
    def total(self) -> float:
        return self.delta + self.eps_prime


def halfwidth(confidence: float, params: BoundParams) -> Halfwidth:
    """Smallest ``delta`` with failure probability at most ``1 - confidence``.

    Starts from the ``alpha/2`` split (each tail set to ``alpha/2``, take the
    larger root) and bisects down to ``BISECT_RTOL`` relative precision.
    """
    alpha = 1.0 - confidence
    if not 0.0 < alpha < 1.0:
        raise ValueError("confidence must lie in (0,1)")
    params.known()
    c_mu, c_is = bound_coefficients(params)
    split = max(math.sqrt(math.log(4.0 / alpha) / c) for c in (c_mu, c_is))
    lo, hi = 0.0, split
    # f(split) <= alpha by construction; tighten toward the minimal root
    while hi - lo > BISECT_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if failure_prob(mid, params) <= alpha:
            hi = mid
        else:
            lo = mid
    return Halfwidth(hi, eps_prime(params), split)


def binomial_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple:
    """Clopper-Pearson interval for a binomial proportion."""
    ci = stats.binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="exact")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class CoverageResult:
    """Per-seed misses of ``|U - U_hat| <= delta + eps'`` and their summary."""

    errors: np.ndarray
    halfwidths: np.ndarray

    @property
    def n_seeds(self) -> int:
        return len(self.errors)

    @property
    def covered(self) -> np.ndarray:
        return self.errors <= self.halfwidths

    @property
    def coverage(self) -> float:
        return float(self.covered.mean())

    @property
    def failure_rate(self) -> float:
        return 1.0 - self.coverage

    def interval(self, confidence: float = 0.95) -> tuple:
        return binomial_interval(int(self.covered.sum()), self.n_seeds, confidence)


def coverage_experiment(trial, seeds: Sequence[int], n_jobs: int = 1) -> CoverageResult:
    """Run ``trial(seed) -> (abs error, halfwidth)`` over ``seeds``.

    ``trial`` must be picklable when ``n_jobs > 1``.  Results are aggregated
    in seed order, so parallel and sequential runs agree exactly.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("coverage experiment needs at least one seed")
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            out = list(pool.map(trial, seeds))
    else:
        out = [trial(s) for s in seeds]
    err, hw = (np.array(x, dtype=float) for x in zip(*out))
    return CoverageResult(err, hw)


def with_bias(params: BoundParams, b_is: float) -> BoundParams:
    return replace(params, b_is=b_is)
