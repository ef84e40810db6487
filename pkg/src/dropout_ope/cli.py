"""Command-line runner: ``dropout-ope {generate,evaluate,bound,oracle,reproduce}``.

Configuration is a JSON file; every flag overrides the matching key and the
effective configuration is written to ``<out>/config.json``.  Every output is
a function of the configuration alone, so reruns are byte-identical.

Config keys (all optional except where a command needs them)::

    instance          shipped instance name, or use mdp/behavior below
    mdp               path to an MDP document
    behavior          path to a policy document, or {"epsilon_soft_optimal": eps}
    candidates        {"name": path, ...}; defaults to the instance's candidates
    dropout           {"agent", "reward_mode", "refreshed_rewards", "weighting"}
    dataset           {"path", "n_traj", "horizon", "mu_horizon", "seed", "init"}
    estimator         {"kind", "fit_fraction", "split_seed", "min_horizon",
                       "min_horizon_candidates", "holdout_fraction", "mu_weights"}
    confidence        e.g. 0.95
    b_is, t_mix       bias bound and mixing-time overrides for the interval
    bound             BoundParams fields for the ``bound`` command
    oracle            {"n_traj", "horizon_grid", "start", "seed"}
    jobs, out
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import confidence as cf
from . import estimators as est
from . import formats, instances, mc_oracle, trajectories
from .dropout import DropoutIndex, DropoutSpec, build_post_dropout, optimality_gap
from .instances import Instance
from .mdp_core import epsilon_soft, induced_chain, optimal_policy

DEFAULTS = {
    "instance": None,
    "mdp": None,
    "behavior": None,
    "candidates": None,
    "dropout": {"agent": None, "reward_mode": None, "refreshed_rewards": None, "weighting": "conditional"},
    "dataset": {"path": None, "n_traj": 1000, "horizon": 500, "mu_horizon": 100000, "seed": 0, "init": "stationary"},
    "estimator": {
        "kind": "dr",
        "fit_fraction": 0.2,
        "split_seed": 0,
        "min_horizon": None,
        "min_horizon_candidates": [25, 50, 100, 200],
        "holdout_fraction": 0.2,
        "mu_weights": "marginal",
    },
    "confidence": 0.95,
    "b_is": None,
    "t_mix": None,
    "bound": {},
    "oracle": {"n_traj": 10, "horizon_grid": None, "start": None, "seed": 0},
    "jobs": 1,
    "out": "out",
}

DATASET_FILE = "dataset.csv"
ESTIMATE_COLUMNS = ("s_bar", "estimate", "n_slices", "delta", "eps_prime", "halfwidth", "lower", "upper")


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: Optional[str]) -> tuple:
    """``(config, base directory for relative paths)``."""
    if path is None:
        return copy.deepcopy(DEFAULTS), Path.cwd()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such config file: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{p}: unknown config keys {unknown}")
    return _merge(DEFAULTS, doc), p.parent


def apply_flags(config: dict, args: argparse.Namespace) -> dict:
    c = copy.deepcopy(config)
    if getattr(args, "seed", None) is not None:
        c["dataset"]["seed"] = args.seed
        c["oracle"]["seed"] = args.seed
        c["estimator"]["split_seed"] = args.seed
    if getattr(args, "out", None) is not None:
        c["out"] = args.out
    if getattr(args, "estimator", None) is not None:
        c["estimator"]["kind"] = args.estimator
    if getattr(args, "confidence", None) is not None:
        c["confidence"] = args.confidence
    if getattr(args, "drop_agent", None) is not None:
        c["dropout"]["agent"] = args.drop_agent
    if getattr(args, "reward_mode", None) is not None:
        c["dropout"]["reward_mode"] = args.reward_mode
    if getattr(args, "jobs", None) is not None:
        c["jobs"] = args.jobs
    if getattr(args, "dataset", None) is not None:
        c["dataset"]["path"] = args.dataset
    return c


def _path(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def resolve_instance(config: dict, base: Path) -> Instance:
    """Build the working instance from a shipped name or from explicit files, then apply dropout overrides."""
    if config["instance"]:
        inst = instances.shipped(config["instance"])
        mdp, behavior, cands = inst.mdp, inst.behavior, dict(inst.candidates)
        agent, mode, refreshed = inst.dropped_agent, inst.reward_mode, inst.refreshed_rewards
    else:
        if not config["mdp"]:
            raise ConfigError("config needs either 'instance' or 'mdp'")
        mdp = formats.load_mdp(_path(base, config["mdp"]))
        beh = config["behavior"]
        if beh is None:
            raise ConfigError("config needs a 'behavior' policy")
        if isinstance(beh, dict):
            if set(beh) != {"epsilon_soft_optimal"}:
                raise ConfigError("behavior spec must be a path or {'epsilon_soft_optimal': eps}")
            behavior = epsilon_soft(optimal_policy(mdp), float(beh["epsilon_soft_optimal"]))
        else:
            behavior = formats.load_policy(_path(base, beh))
        cands, agent, mode, refreshed = {}, mdp.n_agents - 1, "marginalized", None
    d = config["dropout"]
    if d.get("agent") is not None:
        agent = int(d["agent"])
    if d.get("reward_mode") is not None:
        mode = d["reward_mode"]
    if d.get("refreshed_rewards"):
        refreshed = formats.load_rewards(_path(base, d["refreshed_rewards"]))
    if config["candidates"]:
        cands = {k: formats.load_policy(_path(base, v)) for k, v in config["candidates"].items()}
    if mode == "refreshed" and refreshed is None:
        raise ConfigError("refreshed reward mode needs dropout.refreshed_rewards")
    if mode == "marginalized":
        refreshed = None
    name = config["instance"] or Path(config["mdp"]).stem
    return Instance(name, mdp, behavior, agent, mode, refreshed, cands)


def _spec(inst: Instance, config: dict) -> DropoutSpec:
    return inst.spec(config["dropout"].get("weighting") or "conditional")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _echo_config(config: dict, out: Path) -> None:
    _write(out / "config.json", json.dumps(config, indent=1, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def _kv(d: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in d.items())


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- generate -----------------------------------------------------------------


def cmd_generate(config: dict, base: Path) -> int:
    inst = resolve_instance(config, base)
    out = _path(base, config["out"])
    ds_cfg = config["dataset"]
    dataset = trajectories.generate(
        inst.mdp,
        inst.behavior,
        int(ds_cfg["n_traj"]),
        int(ds_cfg["horizon"]),
        init=ds_cfg.get("init"),
        seed=int(ds_cfg["seed"]),
        mu_horizon=ds_cfg.get("mu_horizon"),
        n_jobs=int(config["jobs"]),
    )
    path = _path(base, ds_cfg["path"]) if ds_cfg.get("path") else out / DATASET_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    trajectories.write(dataset, path)
    _echo_config(config, out)
    print(f"wrote {dataset.n_traj} trajectories to {path}")
    print(f"sha256={file_digest(path)}")
    return 0


# --- evaluate -----------------------------------------------------------------


def _bound_params(config: dict, inst: Instance, report_b_is, gamma, r_max, horizon, mu_horizon, n_slices) -> cf.BoundParams:
    t_mix = config["t_mix"]
    if t_mix is None:
        t_mix = cf.mixing_time_bound(induced_chain(inst.mdp, inst.behavior))
    b_is = config["b_is"] if config["b_is"] is not None else report_b_is
    if b_is is None:
        raise cf.UnknownBiasError(
            "the self-normalized estimators have no known bias bound; set 'b_is' in the config to form an interval"
        )
    return cf.BoundParams(gamma, r_max, int(horizon), int(mu_horizon), int(n_slices) + 1, float(t_mix), inst.mdp.state_sizes[inst.dropped_agent], float(b_is))


def evaluate_candidate(config: dict, inst: Instance, dataset: trajectories.Dataset, phi) -> dict:
    """Estimate, interval and per-state table for one candidate (pre-dropout data only)."""
    spec = _spec(inst, config)
    ecfg = config["estimator"]
    kind = ecfg["kind"]
    problem = est.transformed_problem(inst.mdp, spec, phi, est.post_reward_matrix(inst.mdp, spec))
    violations = est.check_support(problem.target, problem.behavior)
    if violations:
        s, a = violations[0]
        raise est.SupportError(f"candidate puts mass on (s={s}, a={a}) where the behavior policy has none ({len(violations)} pairs)")
    idx = DropoutIndex.of(inst.mdp, inst.dropped_agent)
    min_h = ecfg.get("min_horizon")
    if min_h is None:
        cands = [h for h in ecfg["min_horizon_candidates"] if h <= dataset.meta["horizon"]]
        if len(cands) >= 2:
            qhat = None
            cv_kind = kind
            if kind == "dr":
                fit_ids, _ = est.split_indices(dataset.n_traj - 1, ecfg["fit_fraction"], ecfg["split_seed"])
                states, actions, _ = dataset.stacked(fit_ids)
                fit = est.make_batch(problem, states, actions)
                qhat = est.fit_qhat(fit, problem.target, problem.gamma, max(cands), problem.n_states, problem.n_actions)
            min_h = est.select_min_horizon(dataset, problem, cands, ecfg["holdout_fraction"], cv_kind, ecfg["split_seed"], qhat=qhat)
        else:
            min_h = cands[0] if cands else dataset.meta["horizon"]
    dg = est.dagger_estimate(
        dataset,
        problem,
        idx,
        kind,
        min_horizon=int(min_h),
        fit_fraction=ecfg["fit_fraction"],
        split_seed=ecfg["split_seed"],
        mu_weights=ecfg["mu_weights"],
    )
    rows = []
    for sb in range(idx.n_post_states):
        n = int(dg.post_counts[sb])
        if not np.isfinite(dg.values[sb]) or n < 1:
            rows.append((sb, float("nan"), n, None, None, None, None, None))
            continue
        params = _bound_params(config, inst, dg.b_is, problem.gamma, problem.r_max, dg.min_horizon, dg.mu_horizon, n)
        hw = cf.halfwidth(config["confidence"], params)
        v = float(dg.values[sb])
        rows.append((sb, v, n, hw.delta, hw.eps_prime, hw.total, v - hw.total, v + hw.total))
    finite = [r for r in rows if r[5] is not None]
    lower = min(r[6] for r in finite) if finite else float("nan")
    worst = max(r[5] for r in finite) if finite else float("nan")
    mean_estimate = float(np.mean([r[1] for r in finite])) if finite else float("nan")
    summary = {
        "kind": kind,
        "n_traj": dataset.n_traj,
        "n_is_traj": dataset.n_traj - 1,
        "horizon": dataset.meta["horizon"],
        "min_horizon": dg.min_horizon,
        "mu_horizon": dg.mu_horizon,
        "b_is": "unknown" if dg.b_is is None else dg.b_is,
        "confidence": config["confidence"],
        "t_mix": config["t_mix"] if config["t_mix"] is not None else cf.mixing_time_bound(induced_chain(inst.mdp, inst.behavior)),
        "t_mix_source": "config" if config["t_mix"] is not None else "joint chain under behavior",
        "r_max": problem.r_max,
        "fit_size": dg.fit_size,
        "unvisited_pairs": dg.n_unvisited,
        "mean_estimate": mean_estimate,
        "max_halfwidth": worst,
        "min_lower_bound": lower,
    }
    return {"rows": rows, "summary": summary, "dagger": dg}


def _load_dataset(config: dict, base: Path, inst: Instance) -> trajectories.Dataset:
    out = _path(base, config["out"])
    p = config["dataset"].get("path")
    path = _path(base, p) if p else out / DATASET_FILE
    return trajectories.read(path, inst.mdp, inst.behavior)


def cmd_evaluate(config: dict, base: Path) -> int:
    inst = resolve_instance(config, base)
    if not inst.candidates:
        raise ConfigError("no candidate policies to evaluate")
    dataset = _load_dataset(config, base, inst)
    out = _path(base, config["out"])
    ranking = []
    for name in sorted(inst.candidates):
        res = evaluate_candidate(config, inst, dataset, inst.candidates[name])
        _write(out / f"estimates_{name}.csv", _csv(ESTIMATE_COLUMNS, res["rows"]))
        _write(out / f"report_{name}.txt", _kv({"candidate": name, **res["summary"]}))
        s = res["summary"]
        ranking.append((name, s["min_lower_bound"], s["mean_estimate"], s["max_halfwidth"]))
        print(f"{name}: mean estimate {s['mean_estimate']:.6g}, worst-state lower bound {s['min_lower_bound']:.6g}")
    ranking.sort(key=lambda r: (-r[1] if np.isfinite(r[1]) else np.inf, r[0]))
    rows = [(i + 1, *r) for i, r in enumerate(ranking)]
    _write(out / "summary.csv", _csv(("rank", "candidate", "min_lower_bound", "mean_estimate", "max_halfwidth"), rows))
    _echo_config(config, out)
    return 0


# --- bound --------------------------------------------------------------------

BOUND_FIELDS = ("gamma", "r_max", "horizon", "mu_horizon", "n_traj", "t_mix", "s_n_size", "b_is")


def cmd_bound(config: dict, base: Path) -> int:
    b = dict(config["bound"])
    missing = [f for f in BOUND_FIELDS if f not in b and f != "b_is"]
    if missing:
        raise ConfigError(f"bound parameters missing: {missing}")
    b.setdefault("b_is", 0.0)
    if b["b_is"] == "unknown":
        b["b_is"] = None
    params = cf.BoundParams(**{k: b[k] for k in BOUND_FIELDS})
    hw = cf.halfwidth(config["confidence"], params)
    c_mu, c_is = cf.bound_coefficients(params)
    report = {
        **{k: getattr(params, k) for k in BOUND_FIELDS},
        "confidence": config["confidence"],
        "delta": hw.delta,
        "delta_split": hw.split_delta,
        "eps_prime": hw.eps_prime,
        "halfwidth": hw.total,
        "failure_prob": cf.failure_prob(hw.delta, params),
        "c_mu": c_mu,
        "c_is": c_is,
    }
    text = _kv(report)
    sys.stdout.write(text)
    if config["out"]:
        out = _path(base, config["out"])
        _write(out / "bound.txt", text)
        _echo_config(config, out)
    return 0


# --- oracle -------------------------------------------------------------------


def _grid(config: dict, default_max: int) -> list:
    g = config["oracle"].get("horizon_grid")
    return list(range(1, default_max + 1)) if g is None else [int(h) for h in g]


def cmd_oracle(config: dict, base: Path) -> int:
    inst = resolve_instance(config, base)
    spec = _spec(inst, config)
    post = build_post_dropout(inst.mdp, spec)
    out = _path(base, config["out"])
    ocfg = config["oracle"]
    rows = []
    for name in sorted(inst.candidates):
        phi = inst.candidates[name]
        exact = mc_oracle.exact_post_value(post, phi)
        curve = mc_oracle.convergence_curve(post, phi, int(ocfg["n_traj"]), _grid(config, 500), int(ocfg["seed"]), ocfg.get("start"), int(config["jobs"]))
        _write(out / f"curve_{name}.csv", curve.to_csv())
        rows += [(name, s, float(v)) for s, v in enumerate(exact)]
        print(f"{name}: exact value at s_bar={curve.start} is {exact[curve.start]:.6g}, MC at H'={curve.horizons[-1]} is {curve.means[-1]:.6g}")
    _write(out / "exact_values.csv", _csv(("candidate", "s_bar", "value"), rows))
    _echo_config(config, out)
    return 0


# --- reproduce ----------------------------------------------------------------


def reproduce_optgap(config: dict, out: Path) -> None:
    inst = instances.shipped("gapped")
    spec = inst.spec()
    post = build_post_dropout(inst.mdp, spec)
    gap = optimality_gap(inst.mdp, spec)
    policies = {
        "pi_star_marginalized": gap.marginalized_policy,
        "phi_star": gap.post_optimal_policy,
        "random": inst.candidates["random"],
    }
    ocfg = config["oracle"]
    n_traj = max(int(ocfg["n_traj"]), 1)
    grid = _grid(config, 100)
    start = ocfg.get("start")
    if start is None:
        start = int(np.argmax(gap.gap))
    rows, exact_rows = [], []
    for name, pol in policies.items():
        curve = mc_oracle.convergence_curve(post, pol, n_traj, grid, int(ocfg["seed"]), start, int(config["jobs"]))
        rows += [(name, int(h), m, e) for h, m, e in zip(curve.horizons, curve.means, curve.stderrs)]
        exact = mc_oracle.exact_post_value(post, pol)
        exact_rows += [(name, s, float(v)) for s, v in enumerate(exact)]
    _write(out / "optgap.csv", _csv(("policy", "H_prime", "mc_mean", "mc_stderr"), rows))
    _write(out / "optgap_exact.csv", _csv(("policy", "s_bar", "value"), exact_rows))
    summary = {"start": start, "max_gap": float(gap.gap.max()), "argmax_gap": int(np.argmax(gap.gap)), "n_traj": n_traj}
    _write(out / "optgap_summary.txt", _kv(summary))
    print(f"optimality gap {summary['max_gap']:.6g} at s_bar={summary['argmax_gap']}")


def reproduce_convergence(config: dict, out: Path) -> dict:
    """DR estimate and band at one start state against a Monte Carlo curve on the post-dropout system."""
    inst = instances.shipped("three_agent")
    spec = inst.spec()
    post = build_post_dropout(inst.mdp, spec)
    phi = inst.candidates["random"]
    ds_cfg = config["dataset"]
    dataset = trajectories.generate(
        inst.mdp, inst.behavior, int(ds_cfg["n_traj"]), int(ds_cfg["horizon"]), seed=int(ds_cfg["seed"]), mu_horizon=ds_cfg.get("mu_horizon"), n_jobs=int(config["jobs"])
    )
    res = evaluate_candidate(config, inst, dataset, phi)
    ocfg = config["oracle"]
    start = mc_oracle.default_start(post, phi) if ocfg.get("start") is None else int(ocfg["start"])
    row = res["rows"][start]
    estimate, halfwidth = row[1], row[5]
    exact = float(mc_oracle.exact_post_value(post, phi)[start])
    curve = mc_oracle.convergence_curve(post, phi, int(ocfg["n_traj"]), _grid(config, int(ds_cfg["horizon"])), int(ocfg["seed"]), start, int(config["jobs"]))
    lower, upper = estimate - halfwidth, estimate + halfwidth
    crossing = curve.crossing(lower, upper)
    rows = [(int(h), m, e, estimate, lower, upper, exact) for h, m, e in zip(curve.horizons, curve.means, curve.stderrs)]
    _write(out / "convergence.csv", _csv(("H_prime", "mc_mean", "mc_stderr", "dr_estimate", "band_lower", "band_upper", "exact_value"), rows))
    summary = {
        "start": start,
        "exact_value": exact,
        "estimate": estimate,
        "halfwidth": halfwidth,
        "delta": row[3],
        "eps_prime": row[4],
        "band_lower": lower,
        "band_upper": upper,
        "exact_in_band": lower <= exact <= upper,
        "crossing_H_prime": crossing,
        "mc_n_traj": curve.n_traj,
        **{f"est_{k}": v for k, v in res["summary"].items()},
    }
    _write(out / "convergence_summary.txt", _kv(summary))
    print(f"exact {exact:.6g}, DR estimate {estimate:.6g} +/- {halfwidth:.6g}, MC enters band at H'={crossing}")
    return summary


def cmd_reproduce(config: dict, base: Path, figure: str) -> int:
    out = _path(base, config["out"])
    if figure == "optgap":
        reproduce_optgap(config, out)
    else:
        reproduce_convergence(config, out)
    _echo_config(config, out)
    return 0


# --- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="dataset, split and Monte Carlo seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--estimator", choices=est.KINDS)
    common.add_argument("--confidence", type=float, help="interval level, e.g. 0.95")
    common.add_argument("--drop-agent", type=int)
    common.add_argument("--reward-mode", choices=("marginalized", "refreshed"))
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--dataset", help="dataset file (default <out>/dataset.csv)")

    parser = argparse.ArgumentParser(prog="dropout-ope", description="Evaluate post-dropout policies from pre-dropout data.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a pre-dropout dataset")
    sub.add_parser("evaluate", parents=[common], help="estimate candidate values with intervals")
    p = sub.add_parser("bound", parents=[common], help="interval half-width for given parameters")
    for f in BOUND_FIELDS:
        p.add_argument("--" + f.replace("_", "-"), dest="bound_" + f, type=float if f in ("gamma", "r_max", "t_mix") else str if f == "b_is" else int)
    sub.add_parser("oracle", parents=[common], help="exact and Monte Carlo values on the post-dropout system")
    p = sub.add_parser("reproduce", parents=[common], help="write plot data for the optimality-gap or convergence experiment")
    p.add_argument("figure", choices=("optgap", "convergence"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, base = load_config(args.config)
        config = apply_flags(config, args)
        if args.command == "bound":
            for f in BOUND_FIELDS:
                v = getattr(args, "bound_" + f)
                if v is not None:
                    config["bound"][f] = (None if v == "unknown" else float(v)) if f == "b_is" else v
            return cmd_bound(config, base)
        if args.command == "generate":
            return cmd_generate(config, base)
        if args.command == "evaluate":
            return cmd_evaluate(config, base)
        if args.command == "oracle":
            return cmd_oracle(config, base)
        return cmd_reproduce(config, base, args.figure)
    except (FileNotFoundError, ConfigError, formats.FormatError, trajectories.DatasetError, cf.UnknownBiasError, est.SupportError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
