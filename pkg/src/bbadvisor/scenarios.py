"""Meal and disturbance scenarios A (nominal), B (meal jitter), C (B + insulin resistance)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sim import MIN_PER_DAY, START_MINUTE

NOMINAL_TIMES = (7 * 60, 13 * 60, 19 * 60)
NOMINAL_CARBS = (50.0, 75.0, 75.0)
CARB_STD = (5.0, 7.5, 7.5)
DELAY_MEAN = 30.0
DELAY_STD = 5.0
RESISTANCE_C = 0.4
SCENARIOS = ("A", "B", "C")


@dataclass(frozen=True)
class MealEvent:
    t: float  # minutes from midnight
    carbs: float

    def __post_init__(self):
        if self.carbs < 0:
            raise ValueError("carbs must be >= 0")
        if not 0 <= self.t < MIN_PER_DAY:
            raise ValueError(f"meal time must lie in [0, 1440), got {self.t}")


@dataclass
class MealPlan:
    days: int
    events: list[tuple[int, MealEvent]]
    scenario_id: str = "A"
    sensitivity_reduction: float = 0.0
    redraws: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.days < 1:
            raise ValueError(f"days must be >= 1, got {self.days}")
        per_day: dict[int, list[float]] = {}
        for day, ev in self.events:
            if not 0 <= day < self.days:
                raise ValueError(f"meal day {day} outside 0..{self.days - 1}")
            per_day.setdefault(day, []).append(ev.t)
        for day in range(self.days):
            times = per_day.get(day, [])
            if len(times) != 3:
                raise ValueError(f"day {day} has {len(times)} meals, expected 3")
            if times != sorted(times):
                raise ValueError(f"meals of day {day} are not in time order")

    def sim_minutes(self, horizon: int) -> list[tuple[int, float]]:
        """Meals as (simulation minute, carbs); the simulation clock starts at 07:00."""
        out = []
        for day, ev in self.events:
            minute = int(round(day * MIN_PER_DAY + ev.t - START_MINUTE))
            if 0 <= minute < horizon:
                out.append((minute, ev.carbs))
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "t_min", "carbs_g"])
            for day, ev in self.events:
                w.writerow([day, repr(float(ev.t)), repr(float(ev.carbs))])

    @classmethod
    def from_csv(cls, path: str | Path, scenario_id: str = "A",
                 sensitivity_reduction: float = 0.0) -> "MealPlan":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        events = [(int(r["day"]), MealEvent(float(r["t_min"]), float(r["carbs_g"])))
                  for r in rows]
        days = max((d for d, _ in events), default=-1) + 1
        return cls(days, events, scenario_id, sensitivity_reduction)


def _check_days(days: int) -> None:
    if days < 1:
        raise ValueError(f"days must be >= 1, got {days}")


def scenario_a(days: int) -> MealPlan:
    _check_days(days)
    events = [(d, MealEvent(float(t), c)) for d in range(days)
              for t, c in zip(NOMINAL_TIMES, NOMINAL_CARBS)]
    return MealPlan(days, events, "A", 0.0)


def _jittered(days: int, seed: int, scenario_id: str, reduction: float) -> MealPlan:
    _check_days(days)
    rng = np.random.default_rng(seed)
    events = []
    redraws = 0
    for d in range(days):
        for t0, mu, sd in zip(NOMINAL_TIMES, NOMINAL_CARBS, CARB_STD):
            t = t0 + rng.normal(DELAY_MEAN, DELAY_STD)
            while t >= MIN_PER_DAY or t < 0:
                redraws += 1
                t = t0 + rng.normal(DELAY_MEAN, DELAY_STD)
            carbs = max(0.0, float(rng.normal(mu, sd)))
            events.append((d, MealEvent(float(t), carbs)))
    return MealPlan(days, events, scenario_id, reduction, redraws)


def scenario_b(days: int, seed: int) -> MealPlan:
    """Meals delayed by Normal(30, 5) min from nominal; carbs Normal(mean, std), floored at 0."""
    return _jittered(days, seed, "B", 0.0)


def scenario_c(days: int, seed: int) -> MealPlan:
    """Same meal draws as scenario_b for the same seed, with 40% insulin resistance."""
    return _jittered(days, seed, "C", RESISTANCE_C)


def make_plan(scenario: str, days: int, seed: int) -> MealPlan:
    if scenario == "A":
        return scenario_a(days)
    if scenario == "B":
        return scenario_b(days, seed)
    if scenario == "C":
        return scenario_c(days, seed)
    raise ValueError(f"unknown scenario {scenario!r}")
