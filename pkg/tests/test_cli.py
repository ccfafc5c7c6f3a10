import json
import os
import subprocess
import sys
from importlib import resources

import jsonschema
import pytest

from coverkit.cli import COMMANDS, main, to_csv

SMALL = {
    "eval-coverage": {"instance": {"H": 2, "layer_sizes": 3}, "iters": 100},
    "plan-cover": {"instance": {"H": 3}, "epsilon": 0.125},
    "explore-codex": {"instance": {"H": 2}, "T": 15, "epsilon": 0.25},
    "explore-codexr": {"instance": {"H": 2}, "T": 15, "epsilon": 0.25},
    "explore-mf": {"n_psdp": 200},
    "downstream": {"ns": [20, 60]},
    "experiment": {"epochs": 2, "horizon": 20, "n_rollouts": 3, "reinforce_steps": 3,
                   "rollout_len": 40},
    "gen": {"kind": "block"},
}


def schema(name):
    return json.loads(resources.files("coverkit").joinpath("schemas", f"{name}.json").read_text())


def run(capsys, tmp_path, command, cfg, *extra, tag="a"):
    path = tmp_path / f"{command}-{tag}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / f"out-{command}-{tag}"
    code = main([command, "--seed", "3", "--config", str(path), "--out", str(out), *extra])
    captured = capsys.readouterr()
    return code, captured.out, out


def read_tree(root):
    return {os.path.relpath(os.path.join(d, f), root): open(os.path.join(d, f), "rb").read()
            for d, _, fs in os.walk(root) for f in fs}


@pytest.mark.parametrize("command", COMMANDS)
def test_output_validates_and_is_deterministic(capsys, tmp_path, command):
    code, text, out = run(capsys, tmp_path, command, SMALL[command])
    assert code == 0
    jsonschema.validate(json.loads(text), schema(command))
    code2, text2, out2 = run(capsys, tmp_path, command, SMALL[command], tag="b")
    assert code2 == 0 and text2 == text
    assert read_tree(out) == read_tree(out2) and read_tree(out)


@pytest.mark.parametrize("kind", ["random", "linf", "lq", "mountaincar"])
def test_gen_kinds(capsys, tmp_path, kind):
    code, text, out = run(capsys, tmp_path, "gen", {"kind": kind, "N": 20, "H": 5})
    assert code == 0
    jsonschema.validate(json.loads(text), schema("gen"))
    assert os.listdir(out)


def test_singleton_class_prints_expected_psi(capsys, tmp_path):
    from coverkit.envs import gen_random_mdp, random_policy
    mdp = gen_random_mdp(2, 3, 2, seed=0)
    inst = tmp_path / "mdp.json"
    inst.write_text(mdp.to_json())
    pol = random_policy(mdp, 1).to_dict()
    cfg = {"instance": {"path": str(inst)}, "policies": [pol], "epsilon": 0.25, "h": 2}
    code, text, _ = run(capsys, tmp_path, "eval-coverage", cfg)
    assert code == 0
    assert abs(json.loads(text)["psi"] - 1 / 1.25) <= 1e-12


def test_plan_cover_single_iteration_and_check(capsys, tmp_path):
    code, text, out = run(capsys, tmp_path, "plan-cover", {"epsilon": 1.0}, "--check")
    assert code == 0 and json.loads(text)["T"] == 1
    code, text, _ = run(capsys, tmp_path, "plan-cover", {"epsilon": 0.125}, "--check", tag="c")
    assert code == 0 and all(json.loads(text)["checks"].values())
    csv = (out / "trace.csv").read_bytes()
    assert csv.startswith(b"iteration,value\n") and b"\r" not in csv


def test_pushforward_first_layer_is_usage_error(capsys, tmp_path):
    code, _, _ = run(capsys, tmp_path, "plan-cover", {"relaxation": "pushforward", "h": 1})
    assert code == 2


def test_malformed_config_exits_two(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["eval-coverage", "--seed", "0", "--config", str(bad)]) == 2
    assert "cannot parse" in capsys.readouterr().err


def test_unknown_subcommand_and_missing_seed_exit_two():
    for argv in (["nonsense", "--seed", "0"], ["gen"]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2


def test_check_failure_exits_three(capsys, tmp_path, monkeypatch):
    import coverkit.cli as cli
    orig = cli.RUNNERS["plan-cover"]

    def failing(cfg, seed):
        summary, files = orig(cfg, seed)
        summary["checks"]["l1"] = False
        return summary, files

    monkeypatch.setitem(cli.RUNNERS, "plan-cover", failing)
    code, _, _ = run(capsys, tmp_path, "plan-cover", {}, "--check")
    assert code == 3
    code, _, _ = run(capsys, tmp_path, "plan-cover", {}, tag="b")
    assert code == 0


def test_codex_singleton_class_matches_planner(capsys, tmp_path):
    from coverkit.coverage import compute_cinf
    from coverkit.envs import gen_random_mdp
    from coverkit.plan import PlanConfig, plan_linf_relaxation
    mdp = gen_random_mdp(2, 3, 2, seed=4)
    inst = tmp_path / "mdp.json"
    inst.write_text(mdp.to_json())
    cfg = {"instance": {"path": str(inst)}, "models": [mdp.to_dict()], "T": 4, "epsilon": 0.25}
    code, text, _ = run(capsys, tmp_path, "explore-codex", cfg)
    assert code == 0
    rep = json.loads(text)
    for h in (1, 2):
        plan = plan_linf_relaxation(mdp, None, compute_cinf(mdp, None, h)[1], PlanConfig(h, 0.25))
        assert rep["true_coverage"][h - 1] == plan.l1_value


def test_experiment_csv_columns(capsys, tmp_path):
    code, _, out = run(capsys, tmp_path, "experiment", SMALL["experiment"])
    assert code == 0
    for m in ("l1cov", "maxent", "uniform"):
        lines = (out / f"experiment_{m}.csv").read_text().splitlines()
        assert lines[0] == "epoch,unique_states,entropy,objective" and len(lines) == 3


def test_reps_summary_ordered_by_seed(capsys, tmp_path):
    code, text, out = run(capsys, tmp_path, "plan-cover", {}, "--reps", "3")
    assert code == 0
    summary = json.loads(text)
    jsonschema.validate(summary, schema("reps"))
    assert summary["seeds"] == [3, 4, 5]
    for s in (3, 4, 5):
        single = main(["plan-cover", "--seed", str(s)])
        assert single == 0
        assert json.loads(capsys.readouterr().out) == summary["reps"][s - 3]
    assert (out / "summary.json").read_text() == text.strip()
    assert sorted(os.listdir(out)) == ["rep_3", "rep_4", "rep_5", "summary.json"]


def test_bad_reps_exits_two(capsys, tmp_path):
    code, _, _ = run(capsys, tmp_path, "gen", {}, "--reps", "0")
    assert code == 2


def test_csv_format():
    text = to_csv(["a", "b", "c"], [[1, 0.1 + 0.2, True], [None, 1e-20, "x"]])
    assert text == "a,b,c\n1,0.3,true\n,1e-20,x\n"


def test_console_script_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "coverkit.cli", "gen", "--seed", "1"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0
    assert json.loads(r.stdout)["kind"] == "random"
