"""Two-stage curriculum: basal agent first (calculator boluses), then the bolus agent.

Stage 1 runs week-long episodes in which the basal agent injects long-acting
insulin once a day at 07:00 and meals are covered by the conventional bolus
calculator.  Stage 2 freezes that agent and trains a bolus agent deciding
every 15 minutes.
"""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rewards
from .sac import ReplayBuffer, SACAgent, SACConfig, load_checkpoint, save_checkpoint
from .scenarios import make_plan
from .sim import (MIN_PER_DAY, ClosedLoop, PatientParams, SimulationError,
                  apply_insulin_resistance)
from .therapy import ConventionalController, TherapySettings

logger = logging.getLogger(__name__)

EPISODE_DAYS = 7
BOLUS_CADENCE = 15
FASTING_MINUTES = 7 * 60
BASAL_SAMPLES = FASTING_MINUTES // BOLUS_CADENCE  # 28
HISTORY_SLOTS = 3 * 60 // BOLUS_CADENCE  # 12
BOLUS_DEADZONE = 0.1  # U; smaller actions inject nothing

BG_SCALE = 400.0
CARB_SCALE = 100.0
INSULIN_SCALE = 25.0
NORMALIZATION = {"bg": BG_SCALE, "carbs": CARB_SCALE, "insulin": INSULIN_SCALE}

BASAL_BOUNDS = (0.0, 80.0)
BOLUS_BOUNDS = (0.0, 25.0)
BASAL_OBS_DIM = BASAL_SAMPLES
BOLUS_OBS_DIM = 2 + HISTORY_SLOTS


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class StageConfig:
    episodes: int = 2000  # full run; the desk profile uses 300
    warmup_episodes: int = 10
    updates_per_decision: int = 1
    sac: SACConfig = field(default_factory=SACConfig)


def default_basal_config(seed: int = 0, **sac) -> StageConfig:
    cfg = dict(action_low=BASAL_BOUNDS[0], action_high=BASAL_BOUNDS[1], seed=seed,
               hidden_sizes=(64, 64), batch_size=128, reward_scale=0.01, gamma=0.9)
    cfg.update(sac)
    return StageConfig(updates_per_decision=20, sac=SACConfig(**cfg))


def default_bolus_config(seed: int = 0, **sac) -> StageConfig:
    cfg = dict(action_low=BOLUS_BOUNDS[0], action_high=BOLUS_BOUNDS[1], seed=seed,
               hidden_sizes=(64, 64), batch_size=128, reward_scale=1.0, alpha=0.02)
    cfg.update(sac)
    return StageConfig(sac=SACConfig(**cfg))


# --------------------------------------------------------------------------
# observations

def build_observation(kind: str, *, bg_window: Sequence[float] | None = None,
                      bg: float | None = None, carbs: float = 0.0,
                      actions: Sequence[float] | None = None) -> np.ndarray:
    """Normalized agent input.

    basal: the 00:00-07:00 glucose window (1-min samples) downsampled to
    15 min, divided by 400.  bolus: [BG/400, carbs/100, last 12 bolus
    actions/25], oldest action first.
    """
    if kind == "basal":
        if bg_window is None or len(bg_window) < FASTING_MINUTES:
            raise ValueError(f"basal observation needs {FASTING_MINUTES} glucose samples")
        w = np.asarray(bg_window[-FASTING_MINUTES:], dtype=np.float64)
        return w[::BOLUS_CADENCE] / BG_SCALE
    if kind == "bolus":
        if bg is None or actions is None or len(actions) < HISTORY_SLOTS:
            raise ValueError(f"bolus observation needs bg and {HISTORY_SLOTS} past actions")
        hist = np.asarray(list(actions)[-HISTORY_SLOTS:], dtype=np.float64)
        return np.concatenate([[bg / BG_SCALE, carbs / CARB_SCALE], hist / INSULIN_SCALE])
    raise ValueError(f"unknown agent kind {kind!r}")


def basal_observation(loop: ClosedLoop) -> tuple[np.ndarray, bool]:
    """Observation for a decision at the current minute, and whether it was padded."""
    window = loop.glucose_window(loop.t - FASTING_MINUTES, loop.t)
    return build_observation("basal", bg_window=window), loop.t < FASTING_MINUTES


def bolus_units(agent: SACAgent, a_norm: float) -> float:
    units = agent.to_units(a_norm)
    return units if units >= BOLUS_DEADZONE else 0.0


# --------------------------------------------------------------------------
# closed-loop policy used for evaluation

class RLController:
    """Trained basal + bolus agents acting deterministically in closed loop."""

    cadence = BOLUS_CADENCE

    def __init__(self, basal: SACAgent, bolus: SACAgent):
        self.basal = basal
        self.bolus = bolus
        self.reset()

    def reset(self) -> None:
        self.history = deque([0.0] * HISTORY_SLOTS, maxlen=HISTORY_SLOTS)

    def __call__(self, loop: ClosedLoop):
        doses = []
        if loop.t % MIN_PER_DAY == 0:
            obs, _ = basal_observation(loop)
            doses.append(("long_basal", self.basal.to_units(self.basal.act(obs, True))))
        carbs = loop.carbs_between(loop.t, loop.t + BOLUS_CADENCE)
        obs = build_observation("bolus", bg=loop.glucose, carbs=carbs, actions=self.history)
        units = bolus_units(self.bolus, self.bolus.act(obs, True))
        self.history.append(units)
        if units > 0:
            doses.append(("rapid_bolus", units))
        return doses


# --------------------------------------------------------------------------
# training loops

@dataclass
class EpisodeLog:
    episode: int
    patient: int
    reward: float
    warmup: bool
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")


@dataclass
class TrainResult:
    agents: dict[str, SACAgent]
    log: list[EpisodeLog]
    transitions: list = field(default_factory=list)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([e.reward for e in self.log])


def _episode_loop(params: PatientParams, scenario: str, seed: int) -> ClosedLoop:
    plan = make_plan(scenario, EPISODE_DAYS, seed)
    patient = apply_insulin_resistance(params, plan.sensitivity_reduction)
    return ClosedLoop(patient, plan, EPISODE_DAYS)


def _run_with_calculator(loop: ClosedLoop, calc: ConventionalController, t_end: int) -> None:
    """Advance to ``t_end`` delivering calculator boluses at each meal onset."""
    onsets = [m for m, _ in loop.meals if loop.t <= m < t_end]
    for m in sorted(set(onsets)):
        loop.advance(m - loop.t)
        u = calc.meal_bolus(loop)
        if u > 0:
            loop.inject("rapid_bolus", u)
    loop.advance(t_end - loop.t)


def _updates(agent: SACAgent, buffer: ReplayBuffer, n: int, losses: list) -> None:
    for _ in range(n):
        losses.append(agent.update(buffer))


def _snapshot(agent: SACAgent) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in agent.arrays().items()}


def _abort(exc: Exception, agents: dict[str, SACAgent], snapshot: dict[str, np.ndarray],
           name: str, path: Path | None, episode: int, meta: dict) -> TrainingAborted:
    ckpt = None
    if path is not None:
        for key, theta in agents[name].arrays().items():
            theta[:] = snapshot[key]
        ckpt = Path(path).with_suffix(".lastgood.ckpt")
        save_checkpoint(ckpt, agents, {**meta, "aborted_episode": episode})
    return TrainingAborted(f"{name} training aborted at episode {episode}: {exc}", ckpt)


def _initial_agent(init: SACAgent | None, obs_dim: int, stage: StageConfig) -> SACAgent:
    if init is None:
        return SACAgent(obs_dim, stage.sac)
    if init.obs_dim != obs_dim:
        raise ValueError(f"initial agent expects {init.obs_dim} inputs, stage needs {obs_dim}")
    return init


def train_basal(cohort: Sequence[PatientParams], scenario: str = "A",
                stage: StageConfig | None = None, run_seed: int = 0,
                abort_path: Path | None = None, keep_transitions: bool = False,
                init: SACAgent | None = None) -> TrainResult:
    """Stage 1: basal agent acts daily at 07:00; meals get calculator boluses.

    ``init`` continues training an existing agent (per-patient fine-tuning).
    """
    if not cohort:
        raise ValueError("cohort must not be empty")
    stage = stage or default_basal_config(run_seed)
    agent = _initial_agent(init, BASAL_OBS_DIM, stage)
    buffer = ReplayBuffer(stage.sac.replay_capacity, BASAL_OBS_DIM)
    log: list[EpisodeLog] = []
    kept = []
    meta = {"stage": "basal", "scenario": scenario, "normalization": NORMALIZATION}
    for ep in range(stage.episodes):
        snapshot = _snapshot(agent)
        pid = ep % len(cohort)
        params = cohort[pid]
        warm = ep < stage.warmup_episodes
        losses: list = []
        try:
            loop = _episode_loop(params, scenario, run_seed + ep)
            calc = ConventionalController(TherapySettings.for_patient(params), params.body_weight)
            obs, _ = basal_observation(loop)
            daily = []
            for d in range(EPISODE_DAYS):
                a = agent.random_action() if warm else agent.act(obs)
                loop.inject("long_basal", agent.to_units(a))
                _run_with_calculator(loop, calc, (d + 1) * MIN_PER_DAY)
                r = rewards.basal_daily_reward(loop.trace[loop.t - FASTING_MINUTES:loop.t])
                next_obs, _ = basal_observation(loop)
                # episode end is a time limit, not a terminal state
                buffer.push(obs, a, r, next_obs, False)
                if keep_transitions:
                    kept.append((ep, d, loop.trace[loop.t - FASTING_MINUTES:loop.t].copy(), r))
                daily.append(r)
                obs = next_obs
                if not warm:
                    _updates(agent, buffer, stage.updates_per_decision, losses)
        except (SimulationError, FloatingPointError) as exc:
            raise _abort(exc, {"basal": agent}, snapshot, "basal", abort_path, ep, meta) from exc
        entry = EpisodeLog(ep, pid, rewards.basal_episode_reward(daily), warm)
        if losses:
            entry.critic_loss, entry.actor_loss = map(float, np.mean(losses, axis=0))
        log.append(entry)
        logger.info("basal episode %d patient %d reward %.2f", ep, pid, entry.reward)
    return TrainResult({"basal": agent}, log, kept)


def train_bolus(basal_agent: SACAgent, cohort: Sequence[PatientParams], scenario: str = "A",
                stage: StageConfig | None = None, run_seed: int = 0,
                abort_path: Path | None = None, keep_transitions: bool = False,
                init: SACAgent | None = None) -> TrainResult:
    """Stage 2: frozen basal agent in the loop, bolus agent decides every 15 min."""
    if not cohort:
        raise ValueError("cohort must not be empty")
    stage = stage or default_bolus_config(run_seed)
    agent = _initial_agent(init, BOLUS_OBS_DIM, stage)
    buffer = ReplayBuffer(stage.sac.replay_capacity, BOLUS_OBS_DIM)
    steps_per_episode = EPISODE_DAYS * MIN_PER_DAY // BOLUS_CADENCE
    log: list[EpisodeLog] = []
    kept = []
    meta = {"stage": "bolus", "scenario": scenario, "normalization": NORMALIZATION}
    agents = {"basal": basal_agent, "bolus": agent}
    for ep in range(stage.episodes):
        snapshot = _snapshot(agent)
        pid = ep % len(cohort)
        warm = ep < stage.warmup_episodes
        losses: list = []
        total = 0.0
        try:
            loop = _episode_loop(cohort[pid], scenario, run_seed + ep)
            history = deque([0.0] * HISTORY_SLOTS, maxlen=HISTORY_SLOTS)
            carbs = loop.carbs_between(0, BOLUS_CADENCE)
            obs = build_observation("bolus", bg=loop.glucose, carbs=carbs, actions=history)
            for k in range(steps_per_episode):
                if loop.t % MIN_PER_DAY == 0:
                    b_obs, _ = basal_observation(loop)
                    loop.inject("long_basal", basal_agent.to_units(basal_agent.act(b_obs, True)))
                a = agent.random_action() if warm else agent.act(obs)
                units = bolus_units(agent, a)
                loop.inject("rapid_bolus", units)
                loop.advance(BOLUS_CADENCE)
                r = rewards.bolus_step_reward(loop.glucose, units, carbs)
                history.append(units)
                carbs = loop.carbs_between(loop.t, loop.t + BOLUS_CADENCE)
                next_obs = build_observation("bolus", bg=loop.glucose, carbs=carbs,
                                             actions=history)
                buffer.push(obs, a, r, next_obs, False)
                if keep_transitions:
                    kept.append((ep, k, loop.glucose, units, float(obs[1] * CARB_SCALE), r))
                total += r
                obs = next_obs
                if not warm:
                    _updates(agent, buffer, stage.updates_per_decision, losses)
        except (SimulationError, FloatingPointError) as exc:
            raise _abort(exc, agents, snapshot, "bolus", abort_path, ep, meta) from exc
        entry = EpisodeLog(ep, pid, total, warm)
        if losses:
            entry.critic_loss, entry.actor_loss = map(float, np.mean(losses, axis=0))
        log.append(entry)
        logger.info("bolus episode %d patient %d reward %.2f", ep, pid, total)
    return TrainResult(agents, log, kept)


# --------------------------------------------------------------------------
# diagnostics and I/O

def moving_average(x: Sequence[float], window: int = 20) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        raise ValueError(f"need at least {window} values, got {len(x)}")
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def improvement_ratio(rewards_log: Sequence[float], window: int = 20) -> tuple[float, float]:
    """(initial, final) moving-average episode reward."""
    ma = moving_average(rewards_log, window)
    return float(ma[0]), float(ma[-1])


def improved(initial: float, final: float, factor: float = 1.2) -> bool:
    """``final`` beats ``initial`` by ``factor``; for negative baselines the gain is |initial|·(factor-1)."""
    return final >= initial + (factor - 1.0) * abs(initial)


def write_reward_log(log: Sequence[EpisodeLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "patient", "reward", "warmup", "critic_loss", "actor_loss"])
        for e in log:
            w.writerow([e.episode, e.patient, repr(e.reward), int(e.warmup),
                        repr(e.critic_loss), repr(e.actor_loss)])


def read_reward_log(path: str | Path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["reward"]) for r in csv.DictReader(fh)]


def load_controller(path: str | Path) -> RLController:
    agents, meta = load_checkpoint(path)
    if "basal" not in agents or "bolus" not in agents:
        raise ValueError(f"{path} does not hold both basal and bolus agents")
    return RLController(agents["basal"], agents["bolus"])
