"""Glycemic metrics, control-variability grid analysis and paired comparisons."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .scenarios import MealPlan, make_plan
from .sim import MIN_PER_DAY, DoseEvent, PatientParams, apply_insulin_resistance, simulate

EVAL_WINDOW_DAYS = (7, 14)  # second simulated week


@dataclass(frozen=True)
class MetricsReport:
    min: float
    max: float
    mean: float
    pct_below_54: float
    pct_below_70: float
    pct_in_70_180: float
    pct_above_180: float
    pct_above_250: float
    avg_daily_bolus: float
    avg_daily_basal: float


METRIC_LABELS = {
    "min": "min [mg/dL]",
    "max": "max [mg/dL]",
    "mean": "mean [mg/dL]",
    "pct_below_54": "% time < 54 [mg/dL]",
    "pct_below_70": "% time < 70 [mg/dL]",
    "pct_in_70_180": "% time in [70, 180] [mg/dL]",
    "pct_above_180": "% time > 180 [mg/dL]",
    "pct_above_250": "% time > 250 [mg/dL]",
    "avg_daily_bolus": "Avg Daily Bolus [U]",
    "avg_daily_basal": "Avg Daily Basal [U]",
}
METRIC_ORDER = tuple(f.name for f in fields(MetricsReport))


def window_minutes(days: tuple[float, float] = EVAL_WINDOW_DAYS) -> tuple[int, int]:
    return int(round(days[0] * MIN_PER_DAY)), int(round(days[1] * MIN_PER_DAY))


def glycemic_metrics(trace: Sequence[float], doses: Iterable[DoseEvent] = (),
                     eval_window: tuple[int, int] | None = None) -> MetricsReport:
    """Summary statistics over ``trace[start:end]`` (1-min samples).

    In-range is the closed interval [70, 180]; the hypo/hyper bands are
    strict, so below-70 + in-range + above-180 partition the window.  Dose
    averages are per calendar day of the window.
    """
    trace = np.asarray(trace, dtype=np.float64)
    start, end = eval_window if eval_window is not None else (0, len(trace))
    w = trace[start:end]
    if w.size == 0:
        raise ValueError("evaluation window is empty")
    n = w.size
    days = n / MIN_PER_DAY
    bolus = basal = 0.0
    for d in doses:
        if start <= d.t < end:
            if d.kind == "rapid_bolus":
                bolus += d.amount
            else:
                basal += d.amount
    below_70 = np.count_nonzero(w < 70)
    above_180 = np.count_nonzero(w > 180)
    return MetricsReport(
        min=float(w.min()), max=float(w.max()), mean=float(w.mean()),
        pct_below_54=100.0 * np.count_nonzero(w < 54) / n,
        pct_below_70=100.0 * below_70 / n,
        pct_in_70_180=100.0 * (n - below_70 - above_180) / n,
        pct_above_180=100.0 * above_180 / n,
        pct_above_250=100.0 * np.count_nonzero(w > 250) / n,
        avg_daily_bolus=bolus / days, avg_daily_basal=basal / days,
    )


# --------------------------------------------------------------------------
# CVGA

CVGA_X = (50.0, 110.0)
CVGA_Y = (110.0, 400.0)
# (column by minimum BG, row by maximum BG) -> zone
_ZONES = {
    ("hi", "lo"): "A", ("mid", "lo"): "LowerB", ("lo", "lo"): "LowerC",
    ("hi", "mid"): "UpperB", ("mid", "mid"): "B", ("lo", "mid"): "LowerD",
    ("hi", "hi"): "UpperC", ("mid", "hi"): "UpperD", ("lo", "hi"): "E",
}
CVGA_ZONES = tuple(_ZONES.values())


@dataclass(frozen=True)
class CVGAPoint:
    x: float
    y: float
    zone: str


def cvga_zone(min_bg: float, max_bg: float) -> str:
    x = min(max(min_bg, CVGA_X[0]), CVGA_X[1])
    y = min(max(max_bg, CVGA_Y[0]), CVGA_Y[1])
    # ties go to the less severe cell
    col = "hi" if x >= 90 else "mid" if x >= 70 else "lo"
    row = "lo" if y <= 180 else "mid" if y <= 300 else "hi"
    return _ZONES[(col, row)]


def cvga_point(trace: Sequence[float], week_window: tuple[int, int] | None = None) -> CVGAPoint:
    trace = np.asarray(trace, dtype=np.float64)
    start, end = week_window if week_window is not None else (0, len(trace))
    w = trace[start:end]
    if w.size == 0:
        raise ValueError("CVGA window is empty")
    x = min(max(float(w.min()), CVGA_X[0]), CVGA_X[1])
    y = min(max(float(w.max()), CVGA_Y[0]), CVGA_Y[1])
    return CVGAPoint(x, y, cvga_zone(x, y))


# --------------------------------------------------------------------------
# paired t-test

class DegenerateTestError(ValueError):
    """The paired differences have zero variance."""


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on ``a - b``; returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("paired differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return t, t_sf_two_sided(t, n - 1)


# --------------------------------------------------------------------------
# arms

@dataclass
class ComparisonRow:
    metric: str
    mean_a: float
    std_a: float
    mean_b: float | None = None
    std_b: float | None = None
    p_value: float | None = None

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value <= 0.05


def _summary(values: np.ndarray) -> tuple[float, float]:
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def compare_arms(reports_a: Sequence[MetricsReport],
                 reports_b: Sequence[MetricsReport] | None = None) -> list[ComparisonRow]:
    """Population mean ± sample std per metric, with paired p-values when two arms are given.

    Rows follow METRIC_ORDER.  A metric whose paired differences are all zero
    gets p = 1; a constant nonzero difference gets p = 0.
    """
    if reports_b is not None and len(reports_a) != len(reports_b):
        raise ValueError("arms must cover the same cohort")
    rows = []
    for name in METRIC_ORDER:
        va = np.array([getattr(r, name) for r in reports_a])
        row = ComparisonRow(name, *_summary(va))
        if reports_b is not None:
            vb = np.array([getattr(r, name) for r in reports_b])
            row.mean_b, row.std_b = _summary(vb)
            try:
                _, row.p_value = paired_t_test(va, vb)
            except DegenerateTestError:
                row.p_value = 1.0 if np.all(va == vb) else 0.0
        rows.append(row)
    return rows


def format_table(rows: Sequence[ComparisonRow], arm_names: tuple[str, str] = ("Conventional", "RL")) -> str:
    two = rows and rows[0].mean_b is not None
    header = ["Metric", arm_names[0]] + ([arm_names[1], "p-value"] if two else [])
    lines = [header]
    for r in rows:
        cells = [METRIC_LABELS[r.metric], f"{r.mean_a:.2f} ± {r.std_a:.2f}"]
        if two:
            mark = " *" if r.significant else ""
            cells += [f"{r.mean_b:.2f} ± {r.std_b:.2f}", f"{r.p_value:.4f}{mark}"]
        lines.append(cells)
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)


def write_table_csv(rows: Sequence[ComparisonRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean_a", "std_a", "mean_b", "std_b", "p_value", "significant"])
        for r in rows:
            w.writerow([r.metric, repr(r.mean_a), repr(r.std_a),
                        "" if r.mean_b is None else repr(r.mean_b),
                        "" if r.std_b is None else repr(r.std_b),
                        "" if r.p_value is None else repr(r.p_value),
                        int(r.significant)])


def write_cvga_csv(points: Iterable[tuple[int, str, CVGAPoint]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "arm", "x", "y", "zone"])
        for pid, arm, pt in points:
            w.writerow([pid, arm, repr(pt.x), repr(pt.y), pt.zone])


def read_cvga_csv(path: str | Path) -> list[tuple[int, str, CVGAPoint]]:
    with open(path, newline="") as fh:
        return [(int(r["patient_id"]), r["arm"], CVGAPoint(float(r["x"]), float(r["y"]), r["zone"]))
                for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------
# cohort runs

@dataclass
class ArmResult:
    reports: list[MetricsReport]
    points: list[CVGAPoint]
    traces: list[np.ndarray]
    doses: list[list[DoseEvent]]


def run_arm(cohort: Sequence[PatientParams], scenario: str,
            make_controller: Callable[[PatientParams], object], days: int = 14,
            window_days: tuple[float, float] = EVAL_WINDOW_DAYS, seed: int = 0,
            threads: int = 1, plan: MealPlan | None = None) -> ArmResult:
    """Simulate every patient of ``cohort`` under one arm and summarize it.

    Each patient gets its own controller instance; patient ``i`` uses meal-plan
    seed ``seed + i`` unless a fixed ``plan`` is shared by all.  Results are
    independent of ``threads``.
    """
    window = window_minutes(window_days)

    def one(i: int):
        params = cohort[i]
        meals = plan if plan is not None else make_plan(scenario, days, seed + i)
        patient = apply_insulin_resistance(params, meals.sensitivity_reduction)
        return simulate(patient, meals, make_controller(params), days, seed + i)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(len(cohort))))
    else:
        results = [one(i) for i in range(len(cohort))]
    reports = [glycemic_metrics(r.trace, r.doses, window) for r in results]
    points = [cvga_point(r.trace, window) for r in results]
    return ArmResult(reports, points, [r.trace for r in results], [r.doses for r in results])


# --------------------------------------------------------------------------
# SVG

_ZONE_FILL = {"A": "#2e9e44", "LowerB": "#7cc67a", "B": "#7cc67a", "UpperB": "#7cc67a",
              "LowerC": "#f2d14a", "UpperC": "#f2d14a", "LowerD": "#f08a3c",
              "UpperD": "#f08a3c", "E": "#d8413a"}
_ARM_STYLE = {0: ("#d020d0", "#00b7c7", "triangle"), 1: ("#1f4fd1", "#1f4fd1", "square")}


def cvga_svg(points_by_arm: dict[str, Sequence[CVGAPoint]], title: str = "CVGA",
             size: tuple[int, int] = (520, 520)) -> str:
    """Zoned CVGA grid with one marker per patient and mean/std ellipses per arm.

    The x axis runs from 110 (left) down to 50 mg/dL (right), as is usual
    for this plot.
    """
    W, H = size
    ml, mr, mt, mb = 60, 20, 40, 50
    pw, ph = W - ml - mr, H - mt - mb

    def sx(x: float) -> float:
        return ml + (CVGA_X[1] - x) / (CVGA_X[1] - CVGA_X[0]) * pw

    def sy(y: float) -> float:
        return mt + (CVGA_Y[1] - y) / (CVGA_Y[1] - CVGA_Y[0]) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
           f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>']
    cols = {"hi": (110, 90), "mid": (90, 70), "lo": (70, 50)}
    rows = {"lo": (110, 180), "mid": (180, 300), "hi": (300, 400)}
    for (c, r), zone in _ZONES.items():
        x0, x1 = cols[c]
        y0, y1 = rows[r]
        out.append(f'<rect class="zone" data-zone="{zone}" x="{sx(x0):.2f}" y="{sy(y1):.2f}" '
                   f'width="{sx(x1) - sx(x0):.2f}" height="{sy(y0) - sy(y1):.2f}" '
                   f'fill="{_ZONE_FILL[zone]}" fill-opacity="0.45" stroke="#555"/>')
        out.append(f'<text x="{(sx(x0) + sx(x1)) / 2:.2f}" y="{(sy(y0) + sy(y1)) / 2:.2f}" '
                   f'text-anchor="middle" fill="#333">{zone}</text>')
    for x in (110, 90, 70, 50):
        out.append(f'<text x="{sx(x):.2f}" y="{mt + ph + 15}" text-anchor="middle">{x}</text>')
    for y in (110, 180, 300, 400):
        out.append(f'<text x="{ml - 6}" y="{sy(y) + 4:.2f}" text-anchor="end">{y}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">'
               f'Minimum BG [mg/dL]</text>')
    out.append(f'<text x="15" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {mt + ph / 2:.1f})">Maximum BG [mg/dL]</text>')

    for k, (arm, pts) in enumerate(points_by_arm.items()):
        color, stat_color, shape = _ARM_STYLE.get(k % 2)
        for pt in pts:
            cx, cy = sx(pt.x), sy(pt.y)
            if shape == "triangle":
                out.append(f'<polygon class="marker" data-arm="{arm}" points="{cx:.2f},{cy - 5:.2f} '
                           f'{cx - 5:.2f},{cy + 4:.2f} {cx + 5:.2f},{cy + 4:.2f}" fill="{color}"/>')
            else:
                out.append(f'<rect class="marker" data-arm="{arm}" x="{cx - 4:.2f}" y="{cy - 4:.2f}" '
                           f'width="8" height="8" fill="{color}"/>')
        if pts:
            xs = np.array([p.x for p in pts])
            ys = np.array([p.y for p in pts])
            mx, my = xs.mean(), ys.mean()
            rx = xs.std() / (CVGA_X[1] - CVGA_X[0]) * pw
            ry = ys.std() / (CVGA_Y[1] - CVGA_Y[0]) * ph
            out.append(f'<ellipse class="spread" data-arm="{arm}" cx="{sx(mx):.2f}" cy="{sy(my):.2f}" '
                       f'rx="{rx:.2f}" ry="{ry:.2f}" fill="none" stroke="{stat_color}" stroke-width="2"/>')
            out.append(f'<circle class="mean" data-arm="{arm}" cx="{sx(mx):.2f}" cy="{sy(my):.2f}" '
                       f'r="3" fill="{stat_color}"/>')
        out.append(f'<text x="{ml + 8}" y="{mt + 14 + 14 * k}" fill="{color}">{arm}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
