import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from bbadvisor.evaluation import (CVGA_ZONES, METRIC_ORDER, DegenerateTestError, MetricsReport,
                                  compare_arms, cvga_point, cvga_svg, cvga_zone, format_table,
                                  glycemic_metrics, paired_t_test, read_cvga_csv,
                                  regularized_incomplete_beta, run_arm, write_cvga_csv,
                                  write_table_csv)
from bbadvisor.sim import DoseEvent
from bbadvisor.therapy import ConventionalController, TherapySettings

WEEK = 7 * 1440


# -- metrics ---------------------------------------------------------------------

def test_constant_trace():
    m = glycemic_metrics(np.full(WEEK, 125.0))
    assert m.min == m.max == m.mean == 125
    assert m.pct_in_70_180 == 100
    assert m.pct_below_54 == m.pct_below_70 == m.pct_above_180 == m.pct_above_250 == 0
    assert m.avg_daily_bolus == m.avg_daily_basal == 0


def test_split_trace():
    m = glycemic_metrics(np.r_[np.full(WEEK // 2, 60.0), np.full(WEEK // 2, 200.0)])
    assert m.pct_below_70 == 50 and m.pct_above_180 == 50 and m.pct_in_70_180 == 0


def test_daily_dose_averages():
    doses = []
    for d in range(7):
        doses.append(DoseEvent(d * 1440, "long_basal", 28.0))
        doses += [DoseEvent(d * 1440 + k, "rapid_bolus", 5.0) for k in (0, 360, 720)]
    m = glycemic_metrics(np.full(WEEK, 120.0), doses)
    assert m.avg_daily_basal == pytest.approx(28.0) and m.avg_daily_bolus == pytest.approx(15.0)


def test_window_selects_doses_and_samples():
    trace = np.r_[np.full(1440, 300.0), np.full(1440, 100.0)]
    doses = [DoseEvent(10, "long_basal", 50.0), DoseEvent(1500, "long_basal", 20.0)]
    m = glycemic_metrics(trace, doses, (1440, 2880))
    assert m.max == 100 and m.avg_daily_basal == 20.0
    with pytest.raises(ValueError):
        glycemic_metrics(trace, (), (100, 100))


def test_boundaries_are_in_range():
    m = glycemic_metrics([70.0, 180.0, 54.0, 250.0])
    assert m.pct_in_70_180 == 50 and m.pct_below_54 == 0 and m.pct_above_250 == 0


trace_st = st.lists(st.floats(20, 500), min_size=1, max_size=300)


@settings(max_examples=300, deadline=None)
@given(trace=trace_st)
def test_band_partition(trace):
    m = glycemic_metrics(trace)
    assert abs(m.pct_below_70 + m.pct_in_70_180 + m.pct_above_180 - 100) < 1e-9
    assert m.pct_below_54 <= m.pct_below_70 and m.pct_above_250 <= m.pct_above_180


@settings(max_examples=100, deadline=None)
@given(trace=st.lists(st.floats(20, 500), min_size=2, max_size=300), data=st.data())
def test_chunking_invariance(trace, data):
    cut = data.draw(st.integers(1, len(trace) - 1))
    a, b = np.array(trace[:cut]), np.array(trace[cut:])
    whole = glycemic_metrics(np.concatenate([a, b]))
    assert whole == glycemic_metrics(np.concatenate([a, b]).tolist())
    assert whole.min == min(a.min(), b.min()) and whole.max == max(a.max(), b.max())


# -- CVGA ------------------------------------------------------------------------------

def test_cvga_fixtures():
    assert cvga_zone(100, 150) == "A"
    assert cvga_zone(60, 350) == "E"
    assert cvga_zone(95, 250) == "UpperB"
    pt = cvga_point(np.r_[np.full(10, 40.0), np.full(10, 500.0)])
    assert (pt.x, pt.y, pt.zone) == (50.0, 400.0, "E")


def test_cvga_grid_sweep_partitions():
    seen = {z: 0 for z in CVGA_ZONES}
    for x in range(40, 121):
        for y in range(100, 411):
            z = cvga_zone(x, y)
            assert z in seen
            seen[z] += 1
    assert all(v > 0 for v in seen.values())
    assert sum(seen.values()) == 81 * 311


def test_cvga_ties_go_to_less_severe():
    assert cvga_zone(90, 180) == "A"
    assert cvga_zone(70, 300) == "B"
    assert cvga_zone(89.99, 180) == "LowerB"


def test_cvga_csv_and_svg(tmp_path):
    pts = [cvga_point(np.array([95.0, 150.0])), cvga_point(np.array([65.0, 320.0]))]
    rows = [(i, arm, p) for arm in ("Conventional", "RL") for i, p in enumerate(pts)]
    write_cvga_csv(rows, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "patient_id,arm,x,y,zone"
    assert read_cvga_csv(tmp_path / "c.csv") == rows
    svg = cvga_svg({"Conventional": pts, "RL": pts})
    assert svg.count('class="marker"') == 4
    assert svg.count('class="spread"') == 2
    assert svg.count('class="zone"') == 9


# -- statistics ---------------------------------------------------------------------------

def t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def quad_p(t, df):
    tail, _ = quad(t_pdf, abs(t), math.inf, args=(df,), epsabs=1e-13, epsrel=1e-12)
    return 2 * tail


def test_t_test_fixture():
    t, p = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    assert t == pytest.approx(3.4641, abs=1e-4)
    assert p == pytest.approx(0.0742, abs=1e-4)
    # df = 2 has a closed form
    assert p == pytest.approx(1 - t / math.sqrt(2 + t * t), abs=1e-12)


@pytest.mark.parametrize("a,b", [
    ([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]),
    ([5.1, 4.8, 6.0, 5.5, 7.2, 4.9, 5.0, 6.1, 5.3, 5.8], [4.0, 4.9, 5.2, 5.0, 6.0, 4.1, 4.8, 5.5, 5.1, 5.0]),
    ([0.2, -1.0, 0.4, 0.1, 0.0, 0.9], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
])
def test_p_matches_quadrature(a, b):
    t, p = paired_t_test(a, b)
    assert abs(p - quad_p(t, len(a) - 1)) < 1e-6


def test_t_test_errors_and_symmetry():
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_t_test([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        paired_t_test([1], [2])
    t1, p1 = paired_t_test([3, 1, 4, 1, 5], [2, 7, 1, 8, 2])
    t2, p2 = paired_t_test([2, 7, 1, 8, 2], [3, 1, 4, 1, 5])
    assert t1 == -t2 and p1 == p2


def test_incomplete_beta_edges():
    assert regularized_incomplete_beta(0.0, 2, 3) == 0.0
    assert regularized_incomplete_beta(1.0, 2, 3) == 1.0
    # I_x(1, 1) = x
    assert regularized_incomplete_beta(0.37, 1, 1) == pytest.approx(0.37, abs=1e-14)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.2, 1, 1)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_p_decreases_with_abs_t(seed):
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(5):
        d = rng.normal(rng.uniform(-1, 1), 1.0, size=8)
        results.append(paired_t_test(d, np.zeros(8)))
    results.sort(key=lambda tp: abs(tp[0]))
    ps = [p for _, p in results]
    assert all(x >= y - 1e-15 for x, y in zip(ps, ps[1:]))


# -- comparisons -----------------------------------------------------------------------------

def _reports(mean_shift=0.0, n=5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        v = rng.uniform(0, 100, len(METRIC_ORDER))
        out.append(MetricsReport(*v))
    if mean_shift:
        out = [MetricsReport(**{**r.__dict__, "mean": r.mean + mean_shift}) for r in out]
    return out


def test_compare_identical_arms():
    a = _reports()
    rows = compare_arms(a, a)
    assert [r.metric for r in rows] == list(METRIC_ORDER)
    assert all(r.p_value == 1.0 and r.mean_a == r.mean_b for r in rows)


def test_compare_shifted_arm():
    a = _reports()
    b = _reports(mean_shift=10.0)
    row = {r.metric: r for r in compare_arms(a, b)}["mean"]
    assert row.mean_b - row.mean_a == pytest.approx(10.0)
    assert row.p_value < 0.05 and row.significant


def test_compare_single_arm_and_mismatch():
    rows = compare_arms(_reports())
    assert all(r.p_value is None and r.mean_b is None for r in rows)
    with pytest.raises(ValueError):
        compare_arms(_reports(n=3), _reports(n=4))


def test_table_outputs(tmp_path):
    rows = compare_arms(_reports(), _reports(seed=1))
    text = format_table(rows)
    lines = text.splitlines()
    assert "p-value" in lines[0] and len(lines) == 1 + len(METRIC_ORDER)
    assert lines[1].startswith("min [mg/dL]") and lines[-1].startswith("Avg Daily Basal")
    write_table_csv(rows, tmp_path / "t.csv")
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 1 + len(METRIC_ORDER)
    single = format_table(compare_arms(_reports()))
    assert "p-value" not in single


def test_run_arm_threads_agree(cohort3):
    def make(p):
        return ConventionalController(TherapySettings.for_patient(p), p.body_weight)
    one = run_arm(cohort3, "B", make, days=3, window_days=(1, 3), seed=5, threads=1)
    many = run_arm(cohort3, "B", make, days=3, window_days=(1, 3), seed=5, threads=3)
    assert one.reports == many.reports
    assert all(a.tobytes() == b.tobytes() for a, b in zip(one.traces, many.traces))
