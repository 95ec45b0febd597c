"""Reward functions for the basal and bolus agents."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

BASAL_BANDS = ((105.0, 115.0), (100.0, 120.0), (70.0, 180.0))
BOLUS_TARGET = 125.0
BOLUS_BOUNDS = (70.0, 180.0)
ACTION_HIT = 10.0
ACTION_IDLE = 0.0
ACTION_MISS = -2.0


def band_fraction_reward(buffer: Sequence[float], lo: float, hi: float) -> float:
    """``10/n`` times the number of samples strictly inside ``(lo, hi)``."""
    bg = np.asarray(buffer, dtype=np.float64)
    if bg.size == 0:
        raise ValueError("glucose buffer is empty")
    # open interval on both ends
    hits = np.count_nonzero((bg > lo) & (bg < hi))
    return 10.0 * hits / bg.size


def basal_daily_reward(buffer: Sequence[float]) -> float:
    """Sum of exp(r/2) over the three fasting bands."""
    return sum(math.exp(band_fraction_reward(buffer, lo, hi) / 2.0) for lo, hi in BASAL_BANDS)


def basal_episode_reward(daily_rewards: Iterable[float]) -> float:
    return float(sum(daily_rewards))


def bolus_action_reward(prev_action: float, prev_meal: float) -> float:
    if prev_action > 0 and prev_meal > 0:
        return ACTION_HIT
    if prev_action <= 0 and prev_meal <= 0:
        return ACTION_IDLE
    return ACTION_MISS


def bolus_bg_reward(bg: float, target: float = BOLUS_TARGET,
                    bounds: tuple[float, float] = BOLUS_BOUNDS) -> float:
    lo, hi = bounds
    if not math.isfinite(bg):
        raise ValueError(f"glucose must be finite, got {bg}")
    # closed interval: the boundaries themselves count as in range
    if lo <= bg <= hi:
        return 0.1 * math.exp(-abs(bg - target) / 100.0)
    return -0.01 * abs(bg - target)


def bolus_step_reward(bg: float, prev_action: float, prev_meal: float) -> float:
    return bolus_bg_reward(bg) + bolus_action_reward(prev_action, prev_meal)


def bolus_episode_reward(steps: Iterable[tuple[float, float, float]]) -> float:
    """Accumulate every 15-min step ``(bg, prev_action, prev_meal)`` of an episode."""
    return float(sum(bolus_step_reward(bg, a, m) for bg, a, m in steps))
