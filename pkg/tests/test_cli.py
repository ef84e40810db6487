import json

import numpy as np
import pytest

from dropout_ope import cli, formats, instances
from dropout_ope import mdp_core as mc
from dropout_ope import trajectories as tr
from dropout_ope.dropout import build_post_dropout, value_identity_sides, marginalize_policy


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def read_kv(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


def read_csv(path):
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, l.split(","))) for l in lines[1:]]


SMALL = dict(instance="coverage_small", dataset={"n_traj": 101, "horizon": 40, "mu_horizon": 2000}, estimator={"min_horizon": 20})


def test_generate_single_trajectory(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", instance="coverage_small", dataset={"n_traj": 1, "horizon": 5, "mu_horizon": 10})
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    ds = tr.read(tmp_path / "o" / "dataset.csv")
    assert ds.n_traj == 1
    out = capsys.readouterr().out
    assert "sha256=" in out


def test_generate_missing_mdp_names_path(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", mdp="absent.mdp.json", behavior={"epsilon_soft_optimal": 0.2})
    assert cli.main(["generate", "--config", cfg]) == 2
    assert "absent.mdp.json" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", instanse="gapped")
    assert cli.main(["generate", "--config", cfg]) == 2
    assert "instanse" in capsys.readouterr().err


def test_flags_override_and_config_is_echoed(tmp_path):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    out = tmp_path / "o"
    assert cli.main(["generate", "--config", cfg, "--out", str(out), "--seed", "9"]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["dataset"]["seed"] == 9 and echoed["oracle"]["seed"] == 9
    assert echoed["out"] == str(out)


def test_evaluate_writes_reports_and_ranking(tmp_path):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    out = str(tmp_path / "o")
    assert cli.main(["generate", "--config", cfg, "--out", out]) == 0
    assert cli.main(["evaluate", "--config", cfg, "--out", out]) == 0
    rows = read_csv(tmp_path / "o" / "estimates_random.csv")
    assert [r["s_bar"] for r in rows] == ["0", "1"]
    for r in rows:
        assert float(r["lower"]) <= float(r["estimate"]) <= float(r["upper"])
    report = read_kv(tmp_path / "o" / "report_random.txt")
    assert report["kind"] == "dr" and report["t_mix_source"] == "joint chain under behavior"
    assert read_csv(tmp_path / "o" / "summary.csv")[0]["rank"] == "1"


def test_evaluate_wis_needs_bias_bound(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    out = str(tmp_path / "o")
    cli.main(["generate", "--config", cfg, "--out", out])
    assert cli.main(["evaluate", "--config", cfg, "--out", out, "--estimator", "wis"]) == 2
    assert "b_is" in capsys.readouterr().err
    cfg2 = write_config(tmp_path / "c2.json", **SMALL, b_is=0.5)
    assert cli.main(["evaluate", "--config", cfg2, "--out", out, "--estimator", "wis"]) == 0
    assert read_kv(tmp_path / "o" / "report_random.txt")["b_is"] == "unknown"


def test_evaluate_support_violation(tmp_path, capsys):
    inst = instances.shipped("coverage_small")
    formats.save_mdp(inst.mdp, tmp_path / "m.json")
    formats.save_policy(mc.optimal_policy(inst.mdp), tmp_path / "greedy.json")
    formats.save_policy(inst.candidates["random"], tmp_path / "cand.json")
    cfg = write_config(
        tmp_path / "c.json",
        mdp="m.json",
        behavior="greedy.json",
        candidates={"cand": "cand.json"},
        dataset={"n_traj": 5, "horizon": 10, "mu_horizon": 50},
    )
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "behavior policy has none" in capsys.readouterr().err


def test_evaluate_marginalized_behavior_within_interval(tmp_path):
    inst = instances.shipped("coverage_small")
    spec = inst.spec()
    pim = marginalize_policy(inst.mdp, spec, inst.behavior)
    target = value_identity_sides(inst.mdp, spec).post_value
    cand = tmp_path / "pim.json"
    formats.save_policy(pim, cand)
    cfg = dict(SMALL, candidates={"pim": str(cand)}, dataset={"n_traj": 401, "horizon": 40, "mu_horizon": 5000})
    ds = tr.generate(inst.mdp, inst.behavior, 401, 40, seed=0, mu_horizon=5000)
    full = cli._merge(cli.DEFAULTS, cfg)
    res = cli.evaluate_candidate(full, inst, ds, pim)
    for sb, row in enumerate(res["rows"]):
        assert row[6] <= target[sb] <= row[7]


def test_dominated_candidate_ranked_second():
    inst = instances.shipped("coverage_small")
    spec = inst.spec()
    post = build_post_dropout(inst.mdp, spec)
    good = mc.optimal_policy(post)
    # worst deterministic policy: greedy on negated rewards
    neg = mc.FactoredMDP(post.state_sizes, post.action_sizes, post.kernels, tuple(-r for r in post.rewards), post.gamma)
    bad = mc.optimal_policy(neg)
    assert np.all(mc.exact_value(post, good) > mc.exact_value(post, bad))
    full = cli._merge(cli.DEFAULTS, dict(SMALL, dataset={"n_traj": 1000, "horizon": 40, "mu_horizon": 5000}))
    wins = 0
    seeds = range(20)
    for seed in seeds:
        ds = tr.generate(inst.mdp, inst.behavior, 1000, 40, seed=seed, mu_horizon=5000)
        lo = [cli.evaluate_candidate(full, inst, ds, p)["summary"]["min_lower_bound"] for p in (good, bad)]
        wins += lo[0] > lo[1]
    assert wins >= 0.95 * len(seeds)


def test_bound_command(tmp_path, capsys):
    argv = ["bound", "--gamma", "0.9", "--r-max", "1", "--horizon", "100", "--mu-horizon", "100", "--n-traj", "101", "--t-mix", "10", "--s-n-size", "3", "--out", str(tmp_path)]
    assert cli.main(argv) == 0
    rep = read_kv(tmp_path / "bound.txt")
    assert float(rep["halfwidth"]) == pytest.approx(float(rep["delta"]) + float(rep["eps_prime"]), rel=1e-15)
    assert float(rep["failure_prob"]) <= 0.05
    assert cli.main(argv + ["--b-is", "unknown"]) == 2
    assert cli.main(["bound", "--gamma", "0.9"]) == 2
    assert "missing" in capsys.readouterr().err


def test_oracle_command(tmp_path):
    cfg = write_config(tmp_path / "c.json", instance="gapped", oracle={"n_traj": 20, "horizon_grid": [5, 10]})
    assert cli.main(["oracle", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert sorted(p.name for p in (tmp_path / "o").glob("curve_*.csv")) == ["curve_phi_star.csv", "curve_pi_star_marginalized.csv", "curve_random.csv"]
    assert len(read_csv(tmp_path / "o" / "exact_values.csv")) == 3 * 3


def test_reproduce_optgap_orders_curves(tmp_path):
    cfg = write_config(tmp_path / "c.json", oracle={"n_traj": 4000, "horizon_grid": [25, 50, 100]})
    assert cli.main(["reproduce", "optgap", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "optgap.csv")
    last = {r["policy"]: r for r in rows if r["H_prime"] == "100"}
    star, marg = last["phi_star"], last["pi_star_marginalized"]
    se = float(star["mc_stderr"]) + float(marg["mc_stderr"])
    assert float(star["mc_mean"]) >= float(marg["mc_mean"]) - 2 * se
