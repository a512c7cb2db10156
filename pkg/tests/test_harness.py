import json
from pathlib import Path

import numpy as np
import pytest

from adaptclip import cli
from adaptclip.artifacts import SUMMARY_CSV_COLUMNS, read_jsonl, read_summary_csv
from adaptclip.clipping import ConfigError
from adaptclip.config import ConfigFile, parse_seeds, parse_value
from adaptclip.harness import ExperimentPlan, ablate, compare, overhead, report, run_plan

GOLDEN = Path(__file__).parent / "golden"
TINY = ["--iterations", "2", "--set", "rollout_steps=128", "--set", "minibatch_size=32"]


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def tiny_plan(tmp_path, variants="fixed,ppo_br", envs="sparse-chain", seeds="0-2", **over):
    cfg = ConfigFile.parse("[envcore@sparse-chain]\nlength = 6\n")
    overrides = {"total_iterations": 3, "rollout_steps": 128, "minibatch_size": 32, **over}
    return ExperimentPlan.build(cfg, envs=envs, variants=variants, seeds=seeds,
                                overrides=overrides, out_dir=tmp_path)


# ---------------------------------------------------------------- config grammar

def test_parse_values_and_seeds():
    assert parse_value("3") == 3 and parse_value("0.5") == 0.5 and parse_value("true") is True
    assert parse_value("none") is None and parse_value("ppo_br") == "ppo_br"
    assert parse_value("0.5, -1") == (0.5, -1)
    assert parse_seeds("0-4") == [0, 1, 2, 3, 4]
    assert parse_seeds("1,3,7") == [1, 3, 7]
    with pytest.raises(ConfigError):
        parse_seeds("1,1")


def test_scoped_sections_layer_in_order():
    cfg = ConfigFile.parse("""
[plan]
envs = cartpole, sparse-chain
[trainer]
total_iterations = 5
[adaptclip]
lambda_1 = 0.6
[adaptclip@sparse-chain]
lambda_1 = 0.7
[trainer@ppo_br]
total_iterations = 6
[trainer@sparse-chain/ppo_br]
total_iterations = 7
[envcore@sparse-chain]
length = 12
""")
    a = cfg.resolve("cartpole", "ppo_br", 0)
    b = cfg.resolve("sparse-chain", "ppo_br", 0)
    c = cfg.resolve("sparse-chain", "fixed", 0)
    assert a.clip["lambda_1"] == 0.6 and a.total_iterations == 6 and a.env_params == {}
    assert b.clip["lambda_1"] == 0.7 and b.total_iterations == 7 and b.env_params == {"length": 12}
    assert c.total_iterations == 5
    assert cfg.resolve("cartpole", "ppo_br", 0, {"total_iterations": 9}).total_iterations == 9


@pytest.mark.parametrize("text,key", [
    ("[trainer]\nbogus = 1\n", "bogus"),
    ("[optimizer]\nlr = 1\n", "optimizer"),
    ("[adaptclip@moon]\nlambda_1 = 1\n", "adaptclip@moon"),
    ("[plan]\nfoo = 1\n", "foo"),
    ("[envcore@cartpole]\nlength = 5\n", "length"),
])
def test_config_errors_name_key(text, key):
    with pytest.raises(ConfigError) as info:
        ConfigFile.parse(text).resolve("cartpole", "ppo_br", 0)
    assert info.value.key == key


def test_config_value_errors_name_key():
    with pytest.raises(ConfigError) as info:
        ConfigFile.parse("[adaptclip]\ntau = -1\n").resolve("cartpole", "ppo_br", 0)
    assert info.value.key == "tau"


def test_plan_rejects_unknown_and_duplicates(tmp_path):
    with pytest.raises(ConfigError, match="valid variants"):
        ExperimentPlan.build(variants="fixed,nonsense", out_dir=tmp_path)
    with pytest.raises(ConfigError):
        ExperimentPlan.build(variants="fixed,fixed", seeds="0", out_dir=tmp_path)


# ---------------------------------------------------------------- CLI

def test_cli_train_writes_artifacts(tmp_path, monkeypatch):
    monkeypatch.setenv("ADAPTCLIP_OUT", str(tmp_path))
    assert run_cli("train", "--env", "cartpole", "--variant", "ppo_br", "--seed", 0, *TINY) == 0
    d = tmp_path / "cartpole" / "ppo_br" / "0"
    for name in ("run.jsonl", "summary.csv", "checkpoint.npz", "config.json", "timing.jsonl", "DONE"):
        assert (d / name).exists(), name


def test_cli_bad_variant(tmp_path, capsys):
    assert run_cli("train", "--variant", "nonsense", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "variant" in err and "ppo_br" in err and "kl_penalty" in err


def test_cli_bad_flag_is_config_error(capsys):
    assert run_cli("train", "--seed", "abc") == 1


def test_cli_train_twice_is_byte_identical(tmp_path):
    cfg = tmp_path / "plan.cfg"
    cfg.write_text("[plan]\nenvs = sparse-chain\n[envcore]\nlength = 6\n"
                   "[rollout]\nrollout_steps = 128\n[trainer]\ntotal_iterations = 2\nminibatch_size = 32\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("train", "--config", cfg, "--seed", 3, "--out", a) == 0
    assert run_cli("train", "--config", cfg, "--seed", 3, "--out", b) == 0
    rel = Path("sparse-chain/ppo_br/3/run.jsonl")
    assert (a / rel).read_bytes() == (b / rel).read_bytes()
    before = (a / rel).stat().st_mtime_ns
    assert run_cli("train", "--config", cfg, "--seed", 3, "--out", a) == 0
    assert (a / rel).stat().st_mtime_ns == before  # same hash: skipped
    assert run_cli("train", "--config", cfg, "--seed", 3, "--out", a, "--force") == 0
    assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_cli_missing_config_file(tmp_path):
    assert run_cli("train", "--config", tmp_path / "nope.cfg") == 1


def test_cli_report_missing_and_corrupt(tmp_path, capsys):
    assert run_cli("report", tmp_path / "nothing") == 3
    assert run_cli("train", "--env", "cartpole", "--out", tmp_path, *TINY) == 0
    log = tmp_path / "cartpole" / "ppo_br" / "0" / "run.jsonl"
    log.write_text(log.read_text() + "{not json\n")
    assert run_cli("report", tmp_path) == 3
    assert "run.jsonl" in capsys.readouterr().err


def test_cli_compare_ablate_overhead_report(tmp_path, capsys):
    common = ["--out", tmp_path, "--seeds", "0-2", *TINY]
    assert run_cli("compare", "--envs", "cartpole", "--variants", "fixed,ppo_br", *common) == 0
    assert (tmp_path / "compare" / "summary.csv").exists()
    assert run_cli("ablate", "--envs", "cartpole", *common) == 0
    assert (tmp_path / "ablate" / "ablation.csv").exists()
    assert run_cli("overhead", "--env", "cartpole", *common) == 0
    assert "p95" in capsys.readouterr().out
    assert run_cli("report", tmp_path) == 0
    assert (tmp_path / "report" / "epsilon_cartpole.svg").exists()
    assert run_cli("overhead", "--out", tmp_path, "--seeds", "0-1", *TINY) == 1
    assert run_cli("compare", "--variants", "ppo_br", "--out", tmp_path, *TINY) == 1


# ---------------------------------------------------------------- orchestration

def test_compare_reduction_gives_zero_improvement(tmp_path):
    cfg = ConfigFile.parse("[adaptclip@ppo_br]\nlambda_1 = 0\nlambda_2 = 0\n[envcore@sparse-chain]\nlength = 6\n")
    plan = ExperimentPlan.build(cfg, envs="sparse-chain", variants="fixed,ppo_br", seeds="0-4",
                                overrides={"total_iterations": 3, "rollout_steps": 128, "minibatch_size": 32},
                                out_dir=tmp_path)
    res = compare(plan, run_plan(plan))
    br = next(r for r in res["table"] if r["variant"] == "ppo_br")
    assert br["improvement_pct"] == 0.0
    for w in res["wilcoxon"]:
        assert w["p_value"] == 1.0


def test_compare_is_resumable(tmp_path):
    plan = tiny_plan(tmp_path)
    first = run_plan(plan)
    assert {o.status for o in first} == {"trained"}
    again = run_plan(plan)
    assert {o.status for o in again} == {"skipped"}
    assert {o.status for o in run_plan(plan, force=True)} == {"trained"}
    res = compare(plan, again)
    assert [r["variant"] for r in res["table"]] == ["fixed", "ppo_br"]
    assert all(r["n_runs"] == 3 for r in res["table"])
    assert (tmp_path / "compare" / "summary.txt").read_text().count("ppo_br") >= 2


def test_full_variant_plan_has_six_rows(tmp_path):
    variants = "fixed,ppo_br,entropy_only,reward_only,annealed,kl_penalty"
    plan = tiny_plan(tmp_path, variants=variants, seeds="0")
    res = compare(plan, run_plan(plan))
    assert [r["variant"] for r in res["table"]] == variants.split(",")


def test_compare_marks_missing_runs(tmp_path):
    plan = tiny_plan(tmp_path, seeds="0-1")
    outcomes = run_plan(plan)
    outcomes[-1].status = "aborted"
    res = compare(plan, outcomes)
    br = next(r for r in res["table"] if r["variant"] == "ppo_br")
    assert br["missing_runs"] == 1 and br["n_runs"] == 1
    assert "missing runs" in (tmp_path / "compare" / "summary.txt").read_text()


def test_ablation_report_structure(tmp_path):
    plan = tiny_plan(tmp_path, variants="ppo_br,entropy_only,reward_only,fixed")
    res = ablate(plan, run_plan(plan))
    assert {r["variant"] for r in res["table"]} == {"ppo_br", "entropy_only", "reward_only", "fixed"}
    f = res["findings"][0]
    assert isinstance(f["entropy_only_first_success_earlier_majority"], bool)
    assert f["reward_only_variance_le_fixed"] in (True, False, None)
    assert json.loads((tmp_path / "ablate" / "findings.json").read_text())[0]["env"] == "sparse-chain"


def test_overhead_report(tmp_path):
    plan = tiny_plan(tmp_path, envs="cartpole")
    rep = overhead(plan, run_plan(plan))
    assert rep["variants"]["ppo_br"]["iterations"] == 9
    assert rep["variants"]["fixed"]["ratio_p50"] < rep["variants"]["ppo_br"]["ratio_p50"]
    assert 0 < rep["variants"]["ppo_br"]["ratio_p95"] < 1
    assert len(rep["end_to_end_ratio_per_seed"]) == 3


def test_report_curves(tmp_path):
    plan = tiny_plan(tmp_path, variants="fixed,ppo_br,annealed", seeds="0-1", total_iterations=5)
    run_plan(plan)
    files = report(tmp_path)
    assert {f.name for f in files} >= {"learning_curve_sparse-chain.csv", "epsilon_sparse-chain.svg"}
    rows = (tmp_path / "report" / "epsilon_sparse-chain.csv").read_text().splitlines()
    assert rows[0] == "iteration,fixed,ppo_br,annealed"
    data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    assert np.all(data[:, 1] == 0.2)
    assert np.all((data[:, 2] >= 0.14) & (data[:, 2] <= 0.30))
    np.testing.assert_allclose(data[:, 3], [0.2, 0.17, 0.14, 0.11, 0.08], atol=1e-12)
    svg = (tmp_path / "report" / "epsilon_sparse-chain.svg").read_text()
    assert "band 0.14" in svg and "band 0.30" in svg
    first = {f: f.read_bytes() for f in files}
    report(tmp_path)
    assert all(f.read_bytes() == b for f, b in first.items())


# ---------------------------------------------------------------- golden summary

def _golden_config():
    return ConfigFile.parse((GOLDEN / "mini.cfg").read_text())


def test_summary_csv_matches_golden(tmp_path):
    cfg = _golden_config()
    plan = ExperimentPlan.build(cfg, out_dir=tmp_path)
    outcomes = run_plan(plan)
    assert len(outcomes) == 1
    got = read_summary_csv(outcomes[0].path / "summary.csv")
    want = read_summary_csv(GOLDEN / "summary.csv")
    assert list(got[0]) == list(want[0]) == list(SUMMARY_CSV_COLUMNS)
    for k in SUMMARY_CSV_COLUMNS:
        if isinstance(want[0][k], float):
            assert got[0][k] == pytest.approx(want[0][k], rel=1e-9, abs=1e-12), k
        else:
            assert got[0][k] == want[0][k], k
    recs = read_jsonl(outcomes[0].path / "run.jsonl")
    assert all(r["config_hash"] == want[0]["config_hash"] for r in recs)
