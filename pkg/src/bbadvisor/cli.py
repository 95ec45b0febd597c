"""bbadvisor command line: cohort, meal-plan, simulate, train, evaluate, inspect-checkpoint, plot-cvga.

Every command reads one optional YAML config; flags override config keys.
The output directory may also come from $BBADVISOR_OUT.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import yaml

from . import evaluation as ev
from .sac import CheckpointError, SACConfig, load_checkpoint, read_checkpoint, save_checkpoint
from .scenarios import RESISTANCE_C, MealPlan, make_plan
from .sim import SimulationError, load_cohort, make_cohort, save_cohort, write_doses_csv, write_trace_csv
from .therapy import TDD_PER_KG, ConventionalController, TherapySettings
from .training import (TrainingAborted, default_basal_config, default_bolus_config, load_controller,
                       train_basal, train_bolus, write_reward_log)

log = logging.getLogger("bbadvisor")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_ABORT = 4

OUT_ENV = "BBADVISOR_OUT"
DESK_EPISODES = 300
DESK_COHORT = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str = "A"
    cohort_size: int = 10
    cohort_seed: int = 42
    cohort_file: str | None = None
    run_seed: int = 0
    days: int = 14
    eval_window: tuple[float, float] | None = None  # None: days 7-14, or the whole run if shorter
    therapy: dict = field(default_factory=lambda: {"Gd": 120.0, "basal_rate": 0.4,
                                                   "tdd_per_kg": TDD_PER_KG})
    episodes: int | None = None
    warmup_episodes: int | None = None
    updates_per_decision: int | None = None
    sac: dict = field(default_factory=dict)  # {"basal": {...}, "bolus": {...}} overrides
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.scenario not in ("A", "B", "C"):
            raise ConfigError(f"scenario must be A, B or C, got {self.scenario!r}")
        if int(self.cohort_size) < 1:
            raise ConfigError(f"cohort_size must be >= 1, got {self.cohort_size}")
        if int(self.days) < 1:
            raise ConfigError("days must be >= 1")
        if self.eval_window is None:
            self.eval_window = ev.EVAL_WINDOW_DAYS if self.days >= ev.EVAL_WINDOW_DAYS[1] else (0.0, float(self.days))
        lo, hi = self.eval_window
        if not 0 <= lo < hi <= self.days:
            raise ConfigError(f"eval_window {self.eval_window} must lie inside [0, {self.days}]")
        if self.cohort_file is not None and not Path(self.cohort_file).is_file():
            raise ConfigError(f"cohort file {self.cohort_file} does not exist")
        for stage in self.sac:
            if stage not in ("basal", "bolus"):
                raise ConfigError(f"sac overrides must be keyed by basal/bolus, got {stage!r}")
        return self


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if os.environ.get(OUT_ENV):
        data["out_dir"] = os.environ[OUT_ENV]
    data.update({k: v for k, v in overrides.items() if v is not None})
    if data.get("eval_window") is not None:
        data["eval_window"] = tuple(float(v) for v in data["eval_window"])
    if "therapy" in data:
        data["therapy"] = {**RunConfig().therapy, **data["therapy"]}
    try:
        return RunConfig(**data).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _cohort(cfg: RunConfig):
    if cfg.cohort_file:
        return load_cohort(cfg.cohort_file)
    return make_cohort(int(cfg.cohort_size), int(cfg.cohort_seed))


def _out(cfg: RunConfig, *parts: str) -> Path:
    p = Path(cfg.out_dir, *parts)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _settings(cfg: RunConfig, params) -> TherapySettings:
    t = cfg.therapy
    return TherapySettings.for_patient(params, Gd=float(t["Gd"]), basal_rate=float(t["basal_rate"]),
                                       tdd_per_kg=float(t["tdd_per_kg"]))


def _meal_plan(cfg: RunConfig, path: str | None) -> MealPlan | None:
    """Load a shared meal plan CSV; scenario C keeps its insulin resistance."""
    if path is None:
        return None
    if not Path(path).is_file():
        raise ConfigError(f"meal plan {path} does not exist")
    reduction = RESISTANCE_C if cfg.scenario == "C" else 0.0
    try:
        plan = MealPlan.from_csv(path, cfg.scenario, reduction)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad meal plan ({exc})") from exc
    if plan.days < int(cfg.days):
        raise ConfigError(f"{path} covers {plan.days} days but the run needs {cfg.days}")
    return plan


def _arm_factory(cfg: RunConfig, arm: str):
    """``conventional`` or ``checkpoint:PATH`` -> (label, params -> controller)."""
    if arm == "conventional":
        return "Conventional", lambda p: ConventionalController(_settings(cfg, p), p.body_weight)
    if arm.startswith("checkpoint:"):
        path = arm.split(":", 1)[1]
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint {path} does not exist")
        try:
            load_controller(path)
        except (CheckpointError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return "RL", lambda p: load_controller(path)
    raise ConfigError(f"arm must be 'conventional' or 'checkpoint:PATH', got {arm!r}")


# --------------------------------------------------------------------------
# commands

def cmd_cohort(cfg: RunConfig, args) -> int:
    path = Path(args.output) if args.output else _out(cfg, "cohort.yaml")
    cohort = make_cohort(int(cfg.cohort_size), int(cfg.cohort_seed))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_cohort(cohort, path)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    print(f"wrote {len(cohort)} patients to {path}")
    return EXIT_OK


def cmd_meal_plan(cfg: RunConfig, args) -> int:
    path = Path(args.output) if args.output else _out(cfg, f"meals_{cfg.scenario}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    make_plan(cfg.scenario, int(cfg.days), int(cfg.run_seed)).to_csv(path)
    print(f"wrote {cfg.days}-day scenario {cfg.scenario} meal plan to {path}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    arm = "conventional" if args.arm == "conventional" else f"checkpoint:{args.checkpoint or ''}"
    if args.arm == "checkpoint" and not args.checkpoint:
        raise ConfigError("--arm checkpoint requires --checkpoint")
    label, make = _arm_factory(cfg, arm)
    plan = _meal_plan(cfg, args.meal_plan)
    cohort = _cohort(cfg)
    res = ev.run_arm(cohort, cfg.scenario, make, int(cfg.days), cfg.eval_window,
                     int(cfg.run_seed), args.threads, plan)
    name = label.lower()
    for i, (trace, doses) in enumerate(zip(res.traces, res.doses)):
        write_trace_csv(trace, _out(cfg, "simulate", name, f"patient_{i:02d}_trace.csv"))
        write_doses_csv(doses, _out(cfg, "simulate", name, f"patient_{i:02d}_doses.csv"))
    print(f"simulated {len(cohort)} patients, {cfg.days} days, scenario {cfg.scenario} "
          f"-> {Path(cfg.out_dir, 'simulate', name)}")
    return EXIT_OK


def _stage_config(cfg: RunConfig, stage: str, desk: bool):
    make = default_basal_config if stage == "basal" else default_bolus_config
    overrides = dict(cfg.sac.get(stage, {}))
    known = {f.name for f in fields(SACConfig)}
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown SAC keys for {stage}: {sorted(bad)}")
    try:
        sc = make(int(cfg.run_seed), **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if desk:
        sc.episodes = DESK_EPISODES
    elif cfg.episodes is not None:
        sc.episodes = int(cfg.episodes)
    if cfg.warmup_episodes is not None:
        sc.warmup_episodes = int(cfg.warmup_episodes)
    if cfg.updates_per_decision is not None:
        sc.updates_per_decision = int(cfg.updates_per_decision)
    if sc.episodes < 0:
        raise ConfigError("episodes must be >= 0")
    return sc


def _load_agents(path: Path, what: str) -> dict:
    if not path.is_file():
        raise ConfigError(f"{what} {path} not found")
    try:
        agents, _ = load_checkpoint(path)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    return agents


def cmd_train(cfg: RunConfig, args) -> int:
    if args.desk:
        cfg.cohort_size = DESK_COHORT
    stage = _stage_config(cfg, args.stage, args.desk)
    cohort = _cohort(cfg)
    meta = {"scenario": cfg.scenario, "cohort_seed": int(cfg.cohort_seed),
            "cohort_size": len(cohort), "run_seed": int(cfg.run_seed), "episodes": stage.episodes}
    if args.patient is not None:
        # per-patient fine-tuning: train on one cohort member only
        if not 0 <= args.patient < len(cohort):
            raise ConfigError(f"--patient must lie in 0..{len(cohort) - 1}")
        cohort = [cohort[args.patient]]
        meta["patient"] = args.patient
    init_agents = _load_agents(Path(args.init_checkpoint), "initial checkpoint") if args.init_checkpoint else {}
    if args.init_checkpoint and args.stage not in init_agents:
        raise ConfigError(f"{args.init_checkpoint} holds no {args.stage} agent")
    init = init_agents.get(args.stage)
    if args.stage == "basal":
        ckpt = Path(args.output) if args.output else _out(cfg, "basal.ckpt")
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        res = train_basal(cohort, cfg.scenario, stage, int(cfg.run_seed), abort_path=ckpt, init=init)
    else:
        if args.basal_checkpoint:
            basal = _load_agents(Path(args.basal_checkpoint), "basal checkpoint").get("basal")
        elif "basal" in init_agents:
            basal = init_agents["basal"]
        else:
            path = Path(cfg.out_dir, "basal.ckpt")
            if not path.is_file():
                raise ConfigError(f"bolus stage needs a trained basal checkpoint; {path} not found")
            basal = _load_agents(path, "basal checkpoint").get("basal")
        if basal is None:
            raise ConfigError("basal checkpoint holds no basal agent")
        ckpt = Path(args.output) if args.output else _out(cfg, "policy.ckpt")
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        res = train_bolus(basal, cohort, cfg.scenario, stage, int(cfg.run_seed), abort_path=ckpt,
                          init=init)
    save_checkpoint(ckpt, res.agents, {**meta, "stage": args.stage})
    log_path = ckpt.with_name(f"{args.stage}_rewards.csv")
    write_reward_log(res.log, log_path)
    print(f"{args.stage} stage: {stage.episodes} episodes -> {ckpt}, {log_path}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    label_a, make_a = _arm_factory(cfg, args.arm_a)
    arms = [(label_a, make_a)]
    if args.arm_b:
        arms.append(_arm_factory(cfg, args.arm_b))
    if len(arms) == 2 and arms[0][0] == arms[1][0]:
        arms = [(f"{arms[0][0]} (a)", arms[0][1]), (f"{arms[1][0]} (b)", arms[1][1])]
    plan = _meal_plan(cfg, args.meal_plan)
    cohort = _cohort(cfg)
    results = [ev.run_arm(cohort, cfg.scenario, make, int(cfg.days), cfg.eval_window,
                          int(cfg.run_seed), args.threads, plan) for _, make in arms]
    rows = ev.compare_arms(results[0].reports, results[1].reports if len(results) > 1 else None)
    names = tuple(label for label, _ in arms) + ("",)
    table = ev.format_table(rows, names[:2])
    _out(cfg, "table.txt").write_text(table + "\n")
    ev.write_table_csv(rows, _out(cfg, "table.csv"))
    points = [(i, label, pt) for (label, _), r in zip(arms, results) for i, pt in enumerate(r.points)]
    ev.write_cvga_csv(points, _out(cfg, "cvga.csv"))
    svg = ev.cvga_svg({label: r.points for (label, _), r in zip(arms, results)},
                      title=f"CVGA, scenario {cfg.scenario}")
    _out(cfg, "cvga.svg").write_text(svg)
    print(table)
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, args) -> int:
    try:
        header, arrays = read_checkpoint(args.checkpoint)
    except (CheckpointError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    summary = {"agents": header["agents"], "meta": header["meta"],
               "arrays": {k: list(v.shape) for k, v in arrays.items()}}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_plot_cvga(cfg: RunConfig, args) -> int:
    if not Path(args.csv).is_file():
        raise ConfigError(f"{args.csv} does not exist")
    by_arm: dict[str, list] = {}
    for _, arm, pt in ev.read_cvga_csv(args.csv):
        by_arm.setdefault(arm, []).append(pt)
    out = Path(args.output) if args.output else Path(args.csv).with_suffix(".svg")
    out.write_text(ev.cvga_svg(by_arm, title=args.title))
    print(f"wrote {out}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--out", dest="out_dir", help=f"output directory (else ${OUT_ENV} or config)")
    common.add_argument("--scenario", choices=["A", "B", "C"])
    common.add_argument("--cohort-size", type=int)
    common.add_argument("--cohort-seed", type=int)
    common.add_argument("--cohort-file")
    common.add_argument("--run-seed", type=int)
    common.add_argument("--days", type=int)
    common.add_argument("--threads", type=int, default=1,
                        help="rollout workers; 1 is fully deterministic")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="bbadvisor", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cohort", parents=[common], help="generate the synthetic cohort file")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("meal-plan", parents=[common], help="write a scenario meal plan CSV")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_meal_plan)

    p = sub.add_parser("simulate", parents=[common], help="closed-loop rollouts to CSV")
    p.add_argument("--arm", choices=["conventional", "checkpoint"], default="conventional")
    p.add_argument("--checkpoint")
    p.add_argument("--meal-plan", help="CSV (day,t_min,carbs_g) shared by every patient")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train one curriculum stage")
    p.add_argument("--stage", choices=["basal", "bolus"], required=True)
    p.add_argument("--desk", action="store_true", help=f"{DESK_EPISODES} episodes, {DESK_COHORT} patients")
    p.add_argument("--episodes", type=int)
    p.add_argument("--basal-checkpoint", help="frozen basal agent for the bolus stage")
    p.add_argument("--patient", type=int, help="fine-tune on this cohort member only")
    p.add_argument("--init-checkpoint", help="continue from this checkpoint's agent for the stage")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="metrics table, CVGA CSV and SVG")
    p.add_argument("--arm-a", default="conventional", help="'conventional' or 'checkpoint:PATH'")
    p.add_argument("--arm-b", help="second arm; enables paired p-values")
    p.add_argument("--meal-plan", help="CSV (day,t_min,carbs_g) shared by every patient")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-checkpoint", parents=[common], help="print a checkpoint header")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plot-cvga", parents=[common], help="render a CVGA CSV to SVG")
    p.add_argument("csv")
    p.add_argument("-o", "--output")
    p.add_argument("--title", default="CVGA")
    p.set_defaults(func=cmd_plot_cvga)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k, None) for k in
                 ("out_dir", "scenario", "cohort_size", "cohort_seed", "cohort_file", "run_seed",
                  "days", "episodes")}
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except TrainingAborted as exc:
        where = f" (last good weights: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"training aborted: {exc}{where}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
