import csv
import json

import pytest

from bbadvisor import cli
from bbadvisor.sac import SACAgent, save_checkpoint
from bbadvisor.scenarios import MealPlan, scenario_a
from bbadvisor.sim import load_cohort
from bbadvisor.training import BASAL_OBS_DIM, BOLUS_OBS_DIM, read_reward_log

FAST_TRAIN = ["--cohort-size", "1", "--days", "7"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tiny_sac(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text("warmup_episodes: 1\n"
                   "sac:\n"
                   "  basal: {hidden_sizes: [8], batch_size: 8}\n"
                   "  bolus: {hidden_sizes: [8], batch_size: 8}\n")
    return cfg


@pytest.fixture(scope="module")
def policy_ckpt(tmp_path_factory):
    from bbadvisor.training import default_basal_config, default_bolus_config
    path = tmp_path_factory.mktemp("ckpt") / "policy.ckpt"
    agents = {"basal": SACAgent(BASAL_OBS_DIM, default_basal_config(0).sac),
              "bolus": SACAgent(BOLUS_OBS_DIM, default_bolus_config(0).sac)}
    save_checkpoint(path, agents, {"stage": "bolus"})
    return path


# -- cohort ---------------------------------------------------------------------------------

def test_default_cohort_is_reproducible(tmp_path):
    assert run("cohort", "--out", tmp_path / "a") == 0
    assert run("cohort", "--out", tmp_path / "b") == 0
    a, b = tmp_path / "a" / "cohort.yaml", tmp_path / "b" / "cohort.yaml"
    assert a.read_bytes() == b.read_bytes()
    assert len(load_cohort(a)) == 10


def test_invalid_cohort_size_exits_2(tmp_path, capsys):
    assert run("cohort", "--out", tmp_path, "--cohort-size", 0) == cli.EXIT_CONFIG
    assert "cohort_size" in capsys.readouterr().err
    assert not (tmp_path / "cohort.yaml").exists()


def test_bad_config_keys_exit_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scenery: A\n")
    assert run("cohort", "--config", cfg, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("cohort", "--config", tmp_path / "missing.yaml") == cli.EXIT_CONFIG
    cfg.write_text("days: 3\neval_window: [2, 5]\n")
    assert run("cohort", "--config", cfg, "--out", tmp_path) == cli.EXIT_CONFIG


def test_flag_beats_env_beats_config(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"out_dir: {tmp_path / 'from_config'}\ncohort_size: 2\n")
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from_env"))
    assert run("cohort", "--config", cfg) == 0
    assert len(load_cohort(tmp_path / "from_env" / "cohort.yaml")) == 2
    assert run("cohort", "--config", cfg, "--out", tmp_path / "from_flag", "--cohort-size", 3) == 0
    assert len(load_cohort(tmp_path / "from_flag" / "cohort.yaml")) == 3
    assert not (tmp_path / "from_config").exists()


def test_cohort_file_is_used(tmp_path):
    run("cohort", "--out", tmp_path, "--cohort-size", 2)
    assert run("simulate", "--out", tmp_path, "--cohort-file", tmp_path / "cohort.yaml",
               "--days", 1) == 0
    assert len(list((tmp_path / "simulate" / "conventional").glob("*_trace.csv"))) == 2
    assert run("simulate", "--cohort-file", tmp_path / "nope.yaml") == cli.EXIT_CONFIG


# -- simulate -------------------------------------------------------------------------------

def test_simulate_writes_full_trace(tmp_path):
    assert run("simulate", "--out", tmp_path, "--cohort-size", 1) == 0
    rows = (tmp_path / "simulate" / "conventional" / "patient_00_trace.csv").read_text().splitlines()
    assert rows[0] == "t_min,glucose_mgdl" and len(rows) - 1 == 14 * 1440
    doses = list(csv.DictReader(open(tmp_path / "simulate" / "conventional" / "patient_00_doses.csv")))
    assert sum(d["kind"] == "long_basal" for d in doses) == 14
    assert sum(d["kind"] == "rapid_bolus" for d in doses) == 42


def test_simulate_checkpoint_arm(tmp_path, policy_ckpt):
    assert run("simulate", "--arm", "checkpoint", "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("simulate", "--arm", "checkpoint", "--checkpoint", tmp_path / "missing.ckpt",
               "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("simulate", "--arm", "checkpoint", "--checkpoint", policy_ckpt, "--out", tmp_path,
               "--cohort-size", 1, "--days", 2) == 0
    assert (tmp_path / "simulate" / "rl" / "patient_00_trace.csv").is_file()


def test_meal_plan_roundtrip_through_simulate(tmp_path):
    assert run("meal-plan", "--out", tmp_path, "--scenario", "B", "--days", 2, "--run-seed", 4) == 0
    plan_path = tmp_path / "meals_B.csv"
    plan = MealPlan.from_csv(plan_path, "B")
    assert plan.days == 2 and len(plan.events) == 6
    assert run("simulate", "--out", tmp_path, "--scenario", "B", "--days", 2, "--cohort-size", 1,
               "--meal-plan", plan_path) == 0
    assert run("simulate", "--out", tmp_path, "--days", 3, "--meal-plan", plan_path) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.csv"
    bad.write_text("day,t_min,carbs_g\n0,60,50\n")
    assert run("simulate", "--out", tmp_path, "--days", 1, "--meal-plan", bad) == cli.EXIT_CONFIG


def test_meal_plan_matches_scenario(tmp_path):
    run("meal-plan", "--out", tmp_path, "--days", 3)
    assert MealPlan.from_csv(tmp_path / "meals_A.csv") == scenario_a(3)


# -- train ------------------------------------------------------------------------------------

def test_bolus_without_basal_exits_2(tmp_path, capsys):
    assert run("train", "--stage", "bolus", "--out", tmp_path) == cli.EXIT_CONFIG
    assert "basal" in capsys.readouterr().err


def test_desk_preset(tmp_path, monkeypatch):
    seen = {}

    def fake(cohort, scenario, stage, run_seed=0, abort_path=None, **_):
        seen.update(n=len(cohort), episodes=stage.episodes, scenario=scenario)
        raise cli.ConfigError("stop")

    monkeypatch.setattr(cli, "train_basal", fake)
    run("train", "--stage", "basal", "--desk", "--out", tmp_path)
    assert seen == {"n": 3, "episodes": 300, "scenario": "A"}


def test_two_stage_training_and_logs(tmp_path, tiny_sac, capsys):
    args = ("--out", tmp_path, "--config", tiny_sac, *FAST_TRAIN)
    assert run("train", "--stage", "basal", "--episodes", 2, *args) == 0
    assert len(read_reward_log(tmp_path / "basal_rewards.csv")) == 2
    assert run("train", "--stage", "bolus", "--episodes", 3, *args) == 0
    assert len(read_reward_log(tmp_path / "bolus_rewards.csv")) == 3
    capsys.readouterr()
    assert run("inspect-checkpoint", tmp_path / "policy.ckpt") == 0
    info = json.loads(capsys.readouterr().out)
    assert set(info["agents"]) == {"basal", "bolus"}
    assert info["meta"]["stage"] == "bolus" and info["meta"]["episodes"] == 3


def test_unknown_sac_key_exits_2(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("sac:\n  basal: {learning_rate: 0.1}\n")
    assert run("train", "--stage", "basal", "--config", cfg, "--out", tmp_path) == cli.EXIT_CONFIG


def test_inspect_rejects_garbage(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run("inspect-checkpoint", junk) == cli.EXIT_CONFIG


def test_training_abort_exit_code(tmp_path, monkeypatch):
    from bbadvisor.training import TrainingAborted

    def boom(*a, **k):
        raise TrainingAborted("diverged at episode 5", tmp_path / "basal.lastgood.ckpt")

    monkeypatch.setattr(cli, "train_basal", boom)
    assert run("train", "--stage", "basal", "--out", tmp_path) == cli.EXIT_ABORT


# -- evaluate / plot ---------------------------------------------------------------------------

def _small_eval(tmp_path):
    p = tmp_path / "e.yaml"
    p.write_text("days: 3\neval_window: [1, 3]\ncohort_size: 3\n")
    return p


def test_evaluate_single_arm(tmp_path, capsys):
    assert run("evaluate", "--out", tmp_path, "--config", _small_eval(tmp_path)) == 0
    out = capsys.readouterr().out
    assert "p-value" not in out and "Conventional" in out
    assert "p_value" in (tmp_path / "table.csv").read_text().splitlines()[0]
    assert (tmp_path / "cvga.svg").read_text().count('class="marker"') == 3


def test_evaluate_two_arms(tmp_path, capsys, policy_ckpt):
    assert run("evaluate", "--out", tmp_path, "--config", _small_eval(tmp_path),
               "--arm-b", f"checkpoint:{policy_ckpt}") == 0
    out = capsys.readouterr().out
    assert "p-value" in out and "RL" in out
    svg = (tmp_path / "cvga.svg").read_text()
    assert svg.count('class="marker"') == 6
    assert svg.count('class="marker" data-arm="RL"') == 3
    assert svg.count('class="marker" data-arm="Conventional"') == 3
    rows = list(csv.DictReader(open(tmp_path / "cvga.csv")))
    assert len(rows) == 6


def test_evaluate_bad_arm(tmp_path):
    assert run("evaluate", "--out", tmp_path, "--arm-b", "oracle") == cli.EXIT_CONFIG


def test_plot_cvga(tmp_path, capsys):
    run("evaluate", "--out", tmp_path, "--config", _small_eval(tmp_path))
    assert run("plot-cvga", tmp_path / "cvga.csv", "-o", tmp_path / "again.svg") == 0
    assert (tmp_path / "again.svg").read_text().count('class="marker"') == 3
    assert run("plot-cvga", tmp_path / "missing.csv") == cli.EXIT_CONFIG


def test_short_runs_evaluate_whole_run():
    assert cli.load_config(None, {"days": 3}).eval_window == (0.0, 3.0)
    assert cli.load_config(None, {}).eval_window == (7, 14)
    assert cli.load_config(None, {"days": 21}).eval_window == (7, 14)


def test_threads_flag_validated(tmp_path):
    assert run("cohort", "--out", tmp_path, "--threads", 0) == cli.EXIT_CONFIG


def test_per_patient_fine_tuning(tmp_path, tiny_sac, capsys):
    args = ("--out", tmp_path, "--config", tiny_sac, "--cohort-size", 2)
    assert run("train", "--stage", "basal", "--episodes", 1, *args) == 0
    assert run("train", "--stage", "basal", "--episodes", 2, "--patient", 1,
               "--init-checkpoint", tmp_path / "basal.ckpt", "-o", tmp_path / "p1.ckpt", *args) == 0
    assert run("train", "--stage", "bolus", "--episodes", 1, "--patient", 1,
               "--basal-checkpoint", tmp_path / "p1.ckpt", *args) == 0
    capsys.readouterr()
    run("inspect-checkpoint", tmp_path / "p1.ckpt")
    assert json.loads(capsys.readouterr().out)["meta"]["patient"] == 1
    assert run("train", "--stage", "basal", "--patient", 5, *args) == cli.EXIT_CONFIG
    assert run("train", "--stage", "bolus", "--init-checkpoint", tmp_path / "p1.ckpt",
               *args) == cli.EXIT_CONFIG  # holds no bolus agent
