import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbadvisor.scenarios import (DELAY_MEAN, NOMINAL_TIMES, MealEvent, MealPlan, make_plan,
                                 scenario_a, scenario_b, scenario_c)


def test_scenario_a_single_day():
    plan = scenario_a(1)
    assert [(ev.t, ev.carbs) for _, ev in plan.events] == [(420, 50), (780, 75), (1140, 75)]
    assert plan.sensitivity_reduction == 0.0


def test_scenario_a_is_fixed():
    plan = scenario_a(14)
    assert len(plan.events) == 42
    days = [[(ev.t, ev.carbs) for d, ev in plan.events if d == k] for k in range(14)]
    assert all(day == days[0] for day in days)
    assert scenario_a(14) == plan


@pytest.mark.parametrize("fn", [scenario_a, lambda d: scenario_b(d, 0), lambda d: scenario_c(d, 0)])
def test_days_precondition(fn):
    with pytest.raises(ValueError):
        fn(0)


def test_scenario_b_deterministic():
    assert scenario_b(5, 11) == scenario_b(5, 11)
    assert scenario_b(5, 11) != scenario_b(5, 12)


def test_scenario_b_moments():
    plan = scenario_b(10_000, 2024)
    by_slot = [[], [], []]
    delays = [[], [], []]
    for i, (_, ev) in enumerate(plan.events):
        by_slot[i % 3].append(ev.carbs)
        delays[i % 3].append(ev.t - NOMINAL_TIMES[i % 3])
    breakfast = np.array(by_slot[0])
    assert abs(breakfast.mean() - 50) < 0.5
    assert abs(breakfast.std() - 5) < 0.5
    for slot, (mu, sd) in zip(by_slot[1:], [(75, 7.5), (75, 7.5)]):
        assert abs(np.mean(slot) - mu) < 0.5 and abs(np.std(slot) - sd) < 0.5
    for d in delays:
        assert abs(np.mean(d) - DELAY_MEAN) < 0.5 and abs(np.std(d) - 5) < 0.5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), days=st.integers(1, 30))
def test_jittered_plan_invariants(seed, days):
    plan = scenario_b(days, seed)
    assert len(plan.events) == 3 * days
    for d in range(days):
        ts = [ev.t for k, ev in plan.events if k == d]
        assert len(ts) == 3 and ts == sorted(ts)
        assert all(0 <= t < 1440 for t in ts)
    assert all(ev.carbs >= 0 for _, ev in plan.events)


def test_scenario_c_matches_b():
    b, c = scenario_b(7, 5), scenario_c(7, 5)
    assert c.events == b.events
    assert c.sensitivity_reduction == 0.4 and b.sensitivity_reduction == 0.0
    assert len(c.events) == 21


def test_sim_minutes_start_at_seven():
    mins = scenario_a(2).sim_minutes(2 * 1440)
    assert mins[0] == (0, 50.0)
    assert mins[3] == (1440, 50.0)


def test_csv_roundtrip(tmp_path):
    plan = scenario_b(4, 3)
    plan.to_csv(tmp_path / "plan.csv")
    assert (tmp_path / "plan.csv").read_text().splitlines()[0] == "day,t_min,carbs_g"
    back = MealPlan.from_csv(tmp_path / "plan.csv", "B")
    assert back.events == plan.events and back.days == 4


def test_meal_event_validation():
    with pytest.raises(ValueError):
        MealEvent(1440, 10)
    with pytest.raises(ValueError):
        MealEvent(100, -1)
    with pytest.raises(ValueError):
        make_plan("D", 1, 0)
