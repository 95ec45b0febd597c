"""Conventional basal-bolus therapy: bolus calculator plus fixed once-daily basal."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .sim import ClosedLoop, PatientParams, PatientState

BASAL_MINUTE = 7 * 60
TDD_PER_KG = 0.55


@dataclass(frozen=True)
class TherapySettings:
    CR: float  # g/U
    CF: float  # mg/dL per U
    Gd: float = 120.0
    basal_rate: float = 0.4  # U/kg/day

    def __post_init__(self):
        if not (self.CR > 0 and self.CF > 0 and self.basal_rate > 0):
            raise ValueError("CR, CF and basal_rate must be > 0")
        if not 90 <= self.Gd <= 140:
            raise ValueError(f"Gd must lie in [90, 140], got {self.Gd}")

    @classmethod
    def for_patient(cls, params: PatientParams, Gd: float = 120.0, basal_rate: float = 0.4,
                    tdd_per_kg: float = TDD_PER_KG) -> "TherapySettings":
        """500-rule / 1800-rule settings from an estimated total daily dose."""
        tdd = tdd_per_kg * params.body_weight
        return cls(CR=500.0 / tdd, CF=1800.0 / tdd, Gd=Gd, basal_rate=basal_rate)


def bolus_calculator(CHO: float, Gc: float, settings: TherapySettings, iob: float = 0.0) -> float:
    """Meal bolus ``CHO/CR + (Gc - Gd)/CF - iob``, floored at zero."""
    if not all(math.isfinite(v) for v in (CHO, Gc, iob)):
        raise ValueError("bolus inputs must be finite")
    if CHO < 0 or iob < 0:
        raise ValueError("CHO and iob must be >= 0")
    raw = CHO / settings.CR + (Gc - settings.Gd) / settings.CF - iob
    return max(0.0, raw)


def iob(state: PatientState) -> float:
    """Insulin on board: rapid-acting insulin still in the subcutaneous depot."""
    return state.S1 + state.S2


class ConventionalController:
    """Fixed 07:00 long-acting dose and a calculator bolus at every meal onset."""

    cadence = 1

    def __init__(self, settings: TherapySettings, body_weight: float):
        self.settings = settings
        self.daily_basal = settings.basal_rate * body_weight

    def meal_bolus(self, loop: ClosedLoop) -> float:
        """Calculator bolus for a meal starting at the current minute (0 if none)."""
        carbs = float(loop.meal_onsets[loop.t]) if loop.t < loop.n_minutes else 0.0
        if carbs <= 0:
            return 0.0
        return bolus_calculator(carbs, loop.glucose, self.settings, loop.iob())

    def __call__(self, loop: ClosedLoop):
        doses = []
        if loop.minute_of_day == BASAL_MINUTE:
            doses.append(("long_basal", self.daily_basal))
        u = self.meal_bolus(loop)
        if u > 0:
            doses.append(("rapid_bolus", u))
        return doses


def conventional_controller(settings: TherapySettings, body_weight: float) -> ConventionalController:
    return ConventionalController(settings, body_weight)
