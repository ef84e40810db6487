"""Seeded generation, storage and replay of pre-dropout trajectories.

Random numbers come from numpy's ``Philox`` counter-based generator.  The
stream for trajectory ``i`` of a dataset with master seed ``seed`` is
``Philox(SeedSequence([seed, i]))``; it supplies one uniform for the initial
state followed by two uniforms per step (joint action, then joint next
state), each mapped through an inverse CDF.  Trajectories are therefore
independent of generation order, and chunked parallel generation reproduces
sequential output exactly.

The last trajectory of every dataset (index ``n_traj - 1``) is reserved for
estimating the dropped agent's stationary distribution and has its own
length ``mu_horizon``.

Dataset file (UTF-8, line oriented)::

    # dropout-ope dataset v1
    # key=value                      (meta, one per line)
    traj_id,t,s,a,r,s_next,crc
    0,0,5,3,1.0,7,9f3a01c2           (one line per step)
    ...
    # body_sha256=<hex>

``crc`` is the CRC32 of the line text before the final comma, and the
trailer hashes every record line, so corruption and truncation are caught
with a line number.
"""
from __future__ import annotations

import hashlib
from bisect import bisect_right
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .formats import array_digest, mdp_digest, policy_digest
from .mdp_core import FactoredMDP, Policy, _require, stationary_distribution

GENERATOR = "numpy.random.Philox(SeedSequence([seed, index]))"
HEADER = "# dropout-ope dataset v1"
COLUMNS = "traj_id,t,s,a,r,s_next,crc"
META_KEYS = ("seed", "n_traj", "horizon", "mu_horizon", "init", "generator", "mdp_digest", "policy_digest", "init_digest", "records")


class DatasetError(ValueError):
    """Malformed, corrupted or truncated dataset file."""


class DigestMismatchError(DatasetError):
    """The dataset was generated from a different MDP or policy."""


def child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def _cdf(p: np.ndarray) -> np.ndarray:
    """Row CDFs with every entry from the last positive one onward pinned to 1."""
    c = np.cumsum(p, axis=-1)
    positive = p > 0
    last = p.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    cols = np.arange(p.shape[-1])
    c[cols >= last[..., None]] = 1.0
    return c


def _draw(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cdf_rows <= u[:, None]).sum(axis=1)


@dataclass(frozen=True, eq=False)
class Sampler:
    """Inverse-CDF tables for running a policy on an MDP."""

    action_cdf: np.ndarray
    next_cdf: np.ndarray
    init_cdf: np.ndarray
    reward: np.ndarray

    @classmethod
    def build(cls, mdp: FactoredMDP, policy: Policy, init: np.ndarray) -> "Sampler":
        return cls(_cdf(np.asarray(policy.matrix)), _cdf(np.asarray(mdp.transition_tensor)), _cdf(np.asarray(init)), np.asarray(mdp.reward_matrix))

    def run(self, u0: np.ndarray, steps: np.ndarray, start: Optional[np.ndarray] = None):
        """Simulate ``len(u0)`` trajectories in lockstep from pre-drawn uniforms.

        ``steps`` has shape ``(n, L, 2)``.  Returns states ``(n, L+1)``,
        actions ``(n, L)`` and rewards ``(n, L)``.
        """
        n, length = steps.shape[:2]
        if n == 1:
            return self._run_one(float(u0[0]), steps[0], None if start is None else int(np.asarray(start).ravel()[0]))
        states = np.empty((n, length + 1), dtype=np.int64)
        actions = np.empty((n, length), dtype=np.int64)
        s = _draw(np.broadcast_to(self.init_cdf, (n, self.init_cdf.size)), u0) if start is None else np.asarray(start)
        states[:, 0] = s
        for t in range(length):
            a = _draw(self.action_cdf[s], steps[:, t, 0])
            s = _draw(self.next_cdf[s, a], steps[:, t, 1])
            actions[:, t] = a
            states[:, t + 1] = s
        return states, actions, self.reward[states[:, :-1], actions]

    def _run_one(self, u0: float, steps: np.ndarray, start: Optional[int]):
        # scalar loop for long single trajectories; bisect_right matches _draw exactly
        action_cdf = self.action_cdf.tolist()
        next_cdf = self.next_cdf.tolist()
        s = bisect_right(self.init_cdf.tolist(), u0) if start is None else start
        length = steps.shape[0]
        states = [s]
        actions = []
        for ua, us in steps.tolist():
            a = bisect_right(action_cdf[s], ua)
            s = bisect_right(next_cdf[s][a], us)
            actions.append(a)
            states.append(s)
        states = np.array(states, dtype=np.int64)[None, :]
        actions = np.array(actions, dtype=np.int64).reshape(1, length)
        return states, actions, self.reward[states[:, :-1], actions]


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Equal-length trajectories plus one reserved marginalization trajectory (the last)."""

    trajectories: tuple
    meta: dict = field(default_factory=dict)

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)

    @property
    def mu_trajectory(self) -> Trajectory:
        return self.trajectories[-1]

    @property
    def is_trajectories(self) -> tuple:
        return self.trajectories[:-1]

    def stacked(self, indices: Optional[Sequence[int]] = None):
        """``(states, actions, rewards)`` arrays of the non-reserved trajectories."""
        trajs = self.is_trajectories if indices is None else [self.is_trajectories[i] for i in indices]
        if not trajs:
            return np.empty((0, 1), dtype=np.int64), np.empty((0, 0), dtype=np.int64), np.empty((0, 0))
        return (
            np.stack([t.states for t in trajs]),
            np.stack([t.actions for t in trajs]),
            np.stack([t.rewards for t in trajs]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset) or self.meta != other.meta or self.n_traj != other.n_traj:
            return False
        return all(
            np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions) and np.array_equal(a.rewards, b.rewards)
            for a, b in zip(self.trajectories, other.trajectories)
        )

    __hash__ = None


InitSpec = Union[None, str, np.ndarray]


def initial_distribution(mdp: FactoredMDP, policy: Policy, init: InitSpec = None) -> tuple:
    """Resolve ``init`` to ``(label, distribution)``; ``None`` means stationary under ``policy``."""
    if init is None or (isinstance(init, str) and init == "stationary"):
        return "stationary", stationary_distribution(mdp, policy)
    if isinstance(init, str):
        if init != "uniform":
            raise ValueError(f"unknown initial distribution {init!r}")
        return "uniform", np.full(mdp.n_states, 1.0 / mdp.n_states)
    d = np.asarray(init, dtype=float)
    if d.shape != (mdp.n_states,) or np.any(d < 0) or abs(d.sum() - 1) > 1e-12:
        raise ValueError("initial distribution must be a probability vector over joint states")
    return "custom", d


def _uniforms(seed: int, indices: Sequence[int], length: int):
    u0 = np.empty(len(indices))
    steps = np.empty((len(indices), length, 2))
    for j, i in enumerate(indices):
        rng = child_rng(seed, i)
        u0[j] = rng.random()
        steps[j] = rng.random((length, 2))
    return u0, steps


def _simulate_chunk(sampler: Sampler, seed: int, indices: Sequence[int], length: int):
    u0, steps = _uniforms(seed, indices, length)
    return sampler.run(u0, steps)


def generate(
    mdp: FactoredMDP,
    policy: Policy,
    n_traj: int,
    horizon: int,
    init: InitSpec = None,
    seed: int = 0,
    mu_horizon: Optional[int] = None,
    n_jobs: int = 1,
    chunk: int = 256,
) -> Dataset:
    """``n_traj`` trajectories of ``mdp`` under ``policy``; the last one has length ``mu_horizon``."""
    _require(mdp, policy)
    if n_traj < 1 or horizon < 1:
        raise ValueError("need n_traj >= 1 and horizon >= 1")
    mu_horizon = horizon if mu_horizon is None else int(mu_horizon)
    label, d = initial_distribution(mdp, policy, init)
    sampler = Sampler.build(mdp, policy, d)

    blocks = [list(range(i, min(i + chunk, n_traj - 1))) for i in range(0, n_traj - 1, chunk)]
    if n_jobs > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_simulate_chunk, [sampler] * len(blocks), [seed] * len(blocks), blocks, [horizon] * len(blocks)))
    else:
        results = [_simulate_chunk(sampler, seed, b, horizon) for b in blocks]
    results.append(_simulate_chunk(sampler, seed, [n_traj - 1], mu_horizon))

    trajs = []
    for states, actions, rewards in results:
        trajs.extend(Trajectory(states[j], actions[j], rewards[j]) for j in range(len(actions)))
    meta = {
        "seed": int(seed),
        "n_traj": int(n_traj),
        "horizon": int(horizon),
        "mu_horizon": int(mu_horizon),
        "init": label,
        "generator": GENERATOR,
        "mdp_digest": mdp_digest(mdp),
        "policy_digest": policy_digest(policy),
        "init_digest": array_digest(d),
    }
    return Dataset(tuple(trajs), meta)


def empirical_stationary(trajectory: Trajectory, agent: int, state_sizes: Sequence[int]) -> np.ndarray:
    """Visit frequencies of ``agent``'s substate over the trajectory's decision steps."""
    if len(trajectory) < 1:
        raise ValueError("trajectory must have at least one step")
    subs = np.unravel_index(trajectory.states[:-1], tuple(state_sizes))[agent]
    return np.bincount(subs, minlength=state_sizes[agent]) / len(subs)


def empirical_occupancy(trajectory: Trajectory, n_states: int) -> np.ndarray:
    """Visit frequencies of joint states over the trajectory's decision steps."""
    return np.bincount(trajectory.states[:-1], minlength=n_states) / len(trajectory)


def replay_support(dataset: Dataset, mdp: FactoredMDP, policy: Policy) -> list:
    """Logged steps whose action or transition has zero probability, as ``(traj, t, s, a)``."""
    bad = []
    T, pm = mdp.transition_tensor, policy.matrix
    for i, tr in enumerate(dataset.trajectories):
        s, a, s2 = tr.states[:-1], tr.actions, tr.states[1:]
        zero = (pm[s, a] <= 0) | (T[s, a, s2] <= 0)
        bad.extend((i, int(t), int(s[t]), int(a[t])) for t in np.flatnonzero(zero))
    return bad


def _record(i: int, t: int, s: int, a: int, r: float, s2: int) -> str:
    body = f"{i},{t},{s},{a},{r!r},{s2}"
    return f"{body},{zlib.crc32(body.encode()):08x}"


def write(dataset: Dataset, path) -> None:
    """Write ``dataset`` to ``path`` in the line format described in the module docstring."""
    lines = []
    for i, tr in enumerate(dataset.trajectories):
        s, a, r = tr.states.tolist(), tr.actions.tolist(), tr.rewards.tolist()
        lines.extend(_record(i, t, s[t], a[t], float(r[t]), s[t + 1]) for t in range(len(a)))
    sha = hashlib.sha256()
    for line in lines:
        sha.update(line.encode() + b"\n")
    meta = dict(dataset.meta, records=len(lines))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(HEADER + "\n")
        for key in META_KEYS:
            if key in meta:
                fh.write(f"# {key}={meta[key]}\n")
        fh.write(COLUMNS + "\n")
        for line in lines:
            fh.write(line + "\n")
        fh.write(f"# body_sha256={sha.hexdigest()}\n")


_INT_META = ("seed", "n_traj", "horizon", "mu_horizon", "records")


def read(path, mdp: Optional[FactoredMDP] = None, policy: Optional[Policy] = None) -> Dataset:
    """Parse and verify a dataset file; optionally check it against ``mdp`` and ``policy``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().split("\n")
    if raw and raw[-1] == "":
        raw.pop()
    if not raw or raw[0] != HEADER:
        raise DatasetError(f"{path}:1: not a dropout-ope dataset")
    meta, lineno = {}, 1
    while lineno < len(raw) and raw[lineno].startswith("# "):
        key, _, value = raw[lineno][2:].partition("=")
        meta[key] = int(value) if key in _INT_META else value
        lineno += 1
    if lineno >= len(raw) or raw[lineno] != COLUMNS:
        raise DatasetError(f"{path}:{lineno + 1}: missing column header")
    lineno += 1

    sha = hashlib.sha256()
    rows = []
    trailer = None
    for k in range(lineno, len(raw)):
        line = raw[k]
        if line.startswith("# body_sha256="):
            trailer = (k, line.partition("=")[2])
            break
        body, _, crc = line.rpartition(",")
        try:
            ok = f"{zlib.crc32(body.encode()):08x}" == crc
            fields = body.split(",")
            if not ok or len(fields) != 6:
                raise ValueError
            rows.append((int(fields[0]), int(fields[1]), int(fields[2]), int(fields[3]), float(fields[4]), int(fields[5]), k + 1))
        except ValueError:
            raise DatasetError(f"{path}:{k + 1}: corrupted record") from None
        sha.update(line.encode() + b"\n")
    if trailer is None:
        raise DatasetError(f"{path}:{len(raw)}: truncated file (no trailer)")
    if trailer[0] != len(raw) - 1:
        raise DatasetError(f"{path}:{trailer[0] + 2}: data after trailer")
    if "records" in meta and meta["records"] != len(rows):
        raise DatasetError(f"{path}: expected {meta['records']} records, found {len(rows)}")
    if sha.hexdigest() != trailer[1]:
        raise DatasetError(f"{path}:{trailer[0] + 1}: body checksum mismatch")
    meta.pop("records", None)

    trajs = _assemble(rows, path)
    if "n_traj" in meta and meta["n_traj"] != len(trajs):
        raise DatasetError(f"{path}: meta says {meta['n_traj']} trajectories, found {len(trajs)}")
    if mdp is not None and meta.get("mdp_digest") != mdp_digest(mdp):
        raise DigestMismatchError(f"{path}: MDP digest {meta.get('mdp_digest')} does not match {mdp_digest(mdp)}")
    if policy is not None and meta.get("policy_digest") != policy_digest(policy):
        raise DigestMismatchError(f"{path}: policy digest {meta.get('policy_digest')} does not match {policy_digest(policy)}")
    return Dataset(tuple(trajs), meta)


def _assemble(rows, path) -> list:
    trajs = []
    k = 0
    while k < len(rows):
        tid = rows[k][0]
        if tid != len(trajs):
            raise DatasetError(f"{path}:{rows[k][6]}: expected trajectory {len(trajs)}, got {tid}")
        j = k
        while j < len(rows) and rows[j][0] == tid:
            if rows[j][1] != j - k:
                raise DatasetError(f"{path}:{rows[j][6]}: step index {rows[j][1]} out of sequence")
            if j > k and rows[j][2] != rows[j - 1][5]:
                raise DatasetError(f"{path}:{rows[j][6]}: state does not continue previous step")
            j += 1
        block = rows[k:j]
        states = np.array([r[2] for r in block] + [block[-1][5]], dtype=np.int64)
        trajs.append(Trajectory(states, np.array([r[3] for r in block], dtype=np.int64), np.array([r[4] for r in block])))
        k = j
    return trajs
