"""Seeded builders for the shipped experiment instances.

Each builder is deterministic in its seed.  The JSON copies under
``dropout_ope/data`` were written by :func:`freeze` and are what the CLI and
the acceptance tests load; ``tests/test_instances.py`` checks that they still
match a rebuild.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import formats
from .dropout import DropoutSpec, optimality_gap
from .mdp_core import FactoredMDP, FactoredPolicy, epsilon_soft, optimal_policy, random_mdp, random_policy

BEHAVIOR_EPS = 0.2
DATA = "data"


def indicator_rewards(state_sizes, action_sizes, rewarded: int) -> tuple:
    """Local tables ``r_n(s_n, a_n) = 1[s_n = rewarded]``."""
    return tuple(np.repeat((np.arange(k) == rewarded).astype(float)[:, None], a, axis=1) for k, a in zip(state_sizes, action_sizes))


@dataclass(frozen=True, eq=False)
class Instance:
    """An MDP with its behavior policy, dropout setup and candidate policies."""

    name: str
    mdp: FactoredMDP
    behavior: FactoredPolicy
    dropped_agent: int
    reward_mode: str
    refreshed_rewards: Optional[tuple]
    candidates: dict

    def spec(self, weighting: str = "conditional") -> DropoutSpec:
        return DropoutSpec(self.dropped_agent, self.behavior, self.reward_mode, self.refreshed_rewards, weighting)


def three_agent(seed: int = 2024, gamma: float = 0.95, candidate_concentration: float = 1.0) -> Instance:
    """Three agents with three substates and two actions each; agent 2 drops out.

    The pre-dropout reward counts agents in substate 1; the refreshed
    post-dropout reward counts agents in substate 2.  The candidate is a
    Dirichlet-random stochastic policy on the post-dropout system.
    """
    rng = np.random.default_rng(seed)
    sizes, acts = (3, 3, 3), (2, 2, 2)
    mdp = random_mdp(rng, sizes, acts, gamma=gamma).with_rewards(indicator_rewards(sizes, acts, 1))
    behavior = epsilon_soft(optimal_policy(mdp), BEHAVIOR_EPS)
    refreshed = indicator_rewards(sizes[:2], acts[:2], 2)
    phi = random_policy(rng, 9, acts[:2], candidate_concentration)
    return Instance("three_agent", mdp, behavior, 2, "refreshed", refreshed, {"random": phi})


def gapped(seed: int = 0, gamma: float = 0.9, min_gap: float = 0.01, max_tries: int = 1000) -> Instance:
    """First random 2-agent instance whose marginalized optimal policy loses at least ``min_gap``.

    Tries ``seed, seed + 1, ...`` and keeps the first hit, so the result is a
    deterministic function of the arguments.
    """
    for k in range(seed, seed + max_tries):
        rng = np.random.default_rng(k)
        mdp = random_mdp(rng, (3, 3), (2, 2), gamma=gamma, local_rewards=True)
        behavior = epsilon_soft(optimal_policy(mdp), BEHAVIOR_EPS)
        spec = DropoutSpec(1, behavior)
        g = optimality_gap(mdp, spec)
        if g.gap.max() >= min_gap:
            phi_rand = random_policy(rng, 3, (2,), 1.0)
            return Instance(
                "gapped",
                mdp,
                behavior,
                1,
                "marginalized",
                None,
                {"random": phi_rand, "phi_star": g.post_optimal_policy, "pi_star_marginalized": g.marginalized_policy},
            )
    raise RuntimeError(f"no instance with gap >= {min_gap} in {max_tries} tries")


def coverage_small(seed: int = 7, gamma: float = 0.8) -> Instance:
    """Two agents with two substates and actions each, marginalized reward."""
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, (2, 2), (2, 2), gamma=gamma, local_rewards=True)
    behavior = epsilon_soft(optimal_policy(mdp), BEHAVIOR_EPS)
    phi = random_policy(rng, 2, (2,), 5.0)
    return Instance("coverage_small", mdp, behavior, 1, "marginalized", None, {"random": phi})


def coverage_refreshed(seed: int = 11, gamma: float = 0.8) -> Instance:
    """Three two-state agents, agent 0 drops out, refreshed indicator reward."""
    rng = np.random.default_rng(seed)
    sizes, acts = (2, 2, 2), (2, 2, 2)
    mdp = random_mdp(rng, sizes, acts, gamma=gamma).with_rewards(indicator_rewards(sizes, acts, 0))
    behavior = epsilon_soft(optimal_policy(mdp), BEHAVIOR_EPS)
    refreshed = indicator_rewards(sizes[1:], acts[1:], 1)
    phi = random_policy(rng, 4, acts[1:], 5.0)
    return Instance("coverage_refreshed", mdp, behavior, 0, "refreshed", refreshed, {"random": phi})


BUILDERS = {
    "three_agent": three_agent,
    "gapped": gapped,
    "coverage_small": coverage_small,
    "coverage_refreshed": coverage_refreshed,
}


def _files(name: str) -> dict:
    return {
        "mdp": f"{name}.mdp.json",
        "behavior": f"{name}.behavior.json",
        "refreshed": f"{name}.refreshed.json",
    }


def freeze(instance: Instance, directory) -> list:
    """Write the instance as JSON documents plus a manifest; returns the paths written."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = instance.name
    f = _files(name)
    written = [directory / f["mdp"], directory / f["behavior"]]
    formats.save_mdp(instance.mdp, written[0])
    formats.save_policy(instance.behavior, written[1])
    manifest = {
        "format": "dropout-ope/instance",
        "version": 1,
        "name": name,
        "mdp": f["mdp"],
        "behavior": f["behavior"],
        "dropped_agent": instance.dropped_agent,
        "reward_mode": instance.reward_mode,
        "refreshed_rewards": None,
        "candidates": {},
    }
    if instance.refreshed_rewards is not None:
        formats.save_rewards(instance.refreshed_rewards, directory / f["refreshed"])
        manifest["refreshed_rewards"] = f["refreshed"]
        written.append(directory / f["refreshed"])
    for key, pol in instance.candidates.items():
        fname = f"{name}.{key}.json"
        formats.save_policy(pol, directory / fname)
        manifest["candidates"][key] = fname
        written.append(directory / fname)
    formats.write_json(manifest, directory / f"{name}.json")
    written.append(directory / f"{name}.json")
    return written


def load_manifest(path) -> Instance:
    path = Path(path)
    doc = formats.read_json(path)
    if doc.get("format") != "dropout-ope/instance":
        raise formats.FormatError(f"{path} is not an instance manifest")
    base = path.parent
    refreshed = formats.load_rewards(base / doc["refreshed_rewards"]) if doc["refreshed_rewards"] else None
    return Instance(
        doc["name"],
        formats.load_mdp(base / doc["mdp"]),
        formats.load_policy(base / doc["behavior"]),
        int(doc["dropped_agent"]),
        doc["reward_mode"],
        refreshed,
        {k: formats.load_policy(base / v) for k, v in doc["candidates"].items()},
    )


def data_dir() -> Path:
    return Path(str(resources.files("dropout_ope") / DATA))


def shipped(name: str) -> Instance:
    """Load a frozen instance by manifest stem (e.g. ``"three_agent"``)."""
    path = data_dir() / f"{name}.json"
    if not path.exists():
        available = sorted(p.stem for p in data_dir().glob("*.json") if p.stem.count(".") == 0)
        raise FileNotFoundError(f"no shipped instance {name!r}; available: {available}")
    return load_manifest(path)
