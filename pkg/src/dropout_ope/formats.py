"""JSON documents for MDPs, policies and reward tables, plus content digests.

All tables are written as nested lists over joint indices in mixed-radix
order.  Floats go through ``repr`` (17 significant digits) so a write/read
cycle is exact.

MDP document::

    {"format": "dropout-ope/mdp", "version": 1,
     "n_agents": N, "state_sizes": [...], "action_sizes": [...], "gamma": g,
     "rewards": [r_0, ..., r_{N-1}],     # r_n[s][a_n]
     "kernels": [P_0, ..., P_{N-1}]}     # P_n[s][a_n][s_n']

Factored policy document::

    {"format": "dropout-ope/policy", "version": 1, "kind": "factored",
     "tables": [pi_0, ...]}              # pi_n[s][a_n]

Joint policy document::

    {"format": "dropout-ope/policy", "version": 1, "kind": "joint",
     "action_sizes": [...], "table": pi} # pi[s][a]

Reward document (refreshed post-dropout rewards)::

    {"format": "dropout-ope/reward", "version": 1, "rewards": [r_0, ...]}
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .mdp_core import FactoredMDP, FactoredPolicy, JointPolicy, Policy

MDP_FORMAT = "dropout-ope/mdp"
POLICY_FORMAT = "dropout-ope/policy"
REWARD_FORMAT = "dropout-ope/reward"


class FormatError(ValueError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj: Any) -> str:
    """sha256 of the canonical JSON encoding, truncated to 16 hex digits."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def mdp_to_dict(mdp: FactoredMDP) -> dict:
    return {
        "format": MDP_FORMAT,
        "version": 1,
        "n_agents": mdp.n_agents,
        "state_sizes": list(mdp.state_sizes),
        "action_sizes": list(mdp.action_sizes),
        "gamma": mdp.gamma,
        "rewards": [r.tolist() for r in mdp.rewards],
        "kernels": [k.tolist() for k in mdp.kernels],
    }


def mdp_from_dict(doc: dict) -> FactoredMDP:
    _expect(doc, MDP_FORMAT)
    if doc["n_agents"] != len(doc["state_sizes"]):
        raise FormatError("n_agents does not match state_sizes")
    return FactoredMDP(
        tuple(doc["state_sizes"]),
        tuple(doc["action_sizes"]),
        tuple(np.array(k, dtype=float) for k in doc["kernels"]),
        tuple(np.array(r, dtype=float) for r in doc["rewards"]),
        doc["gamma"],
    )


def policy_to_dict(policy: Policy) -> dict:
    if isinstance(policy, FactoredPolicy):
        return {"format": POLICY_FORMAT, "version": 1, "kind": "factored", "tables": [t.tolist() for t in policy.tables]}
    return {
        "format": POLICY_FORMAT,
        "version": 1,
        "kind": "joint",
        "action_sizes": list(policy.action_sizes),
        "table": policy.table.tolist(),
    }


def policy_from_dict(doc: dict) -> Policy:
    _expect(doc, POLICY_FORMAT)
    if doc.get("kind", "factored") == "factored":
        return FactoredPolicy(tuple(np.array(t, dtype=float) for t in doc["tables"]))
    return JointPolicy(np.array(doc["table"], dtype=float), tuple(doc["action_sizes"]))


def rewards_to_dict(tables) -> dict:
    return {"format": REWARD_FORMAT, "version": 1, "rewards": [np.asarray(t).tolist() for t in tables]}


def rewards_from_dict(doc: dict) -> tuple:
    _expect(doc, REWARD_FORMAT)
    return tuple(np.array(t, dtype=float) for t in doc["rewards"])


def _expect(doc: dict, fmt: str) -> None:
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise FormatError(f"expected a {fmt!r} document")
    if doc.get("version") != 1:
        raise FormatError(f"unsupported {fmt} version {doc.get('version')!r}")


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def save_mdp(mdp: FactoredMDP, path) -> None:
    write_json(mdp_to_dict(mdp), path)


def load_mdp(path) -> FactoredMDP:
    return mdp_from_dict(read_json(path))


def save_policy(policy: Policy, path) -> None:
    write_json(policy_to_dict(policy), path)


def load_policy(path) -> Policy:
    return policy_from_dict(read_json(path))


def save_rewards(tables, path) -> None:
    write_json(rewards_to_dict(tables), path)


def load_rewards(path) -> tuple:
    return rewards_from_dict(read_json(path))


def mdp_digest(mdp: FactoredMDP) -> str:
    return digest(mdp_to_dict(mdp))


def policy_digest(policy: Policy) -> str:
    return digest(policy_to_dict(policy))


def array_digest(a: np.ndarray) -> str:
    return digest(np.asarray(a, dtype=float).tolist())
