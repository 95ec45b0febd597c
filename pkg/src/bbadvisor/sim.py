"""Glucose-insulin metabolic simulator.

Bergman minimal model extended with two-compartment subcutaneous kinetics
for rapid-acting (bolus) and long-acting (basal) insulin and a
two-compartment gut.  The integrator is classical RK4 at a fixed step,
compiled with numba so that week-long closed-loop episodes stay cheap.

State vector layout (``STATE_FIELDS``)::

    G   plasma glucose            mg/dL
    X   remote insulin action     1/min
    I   plasma insulin            uU/mL
    S1, S2  rapid-acting SC depot U
    L1, L2  long-acting SC depot  U
    D1, D2  gut carbohydrate      g
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml
from numba import njit

logger = logging.getLogger(__name__)

MIN_PER_DAY = 1440
START_MINUTE = 7 * 60  # every run starts at 07:00 of day 0
INITIAL_GLUCOSE = 125.0
MEAL_SPREAD_MIN = 15  # meals are absorbed into the gut as CHO/15 g/min
U_TO_MICRO_U = 1e6
G_TO_MG = 1000.0

STATE_FIELDS = ("G", "X", "I", "S1", "S2", "L1", "L2", "D1", "D2")
PARAM_FIELDS = (
    "body_weight", "Gb", "Ib", "p1", "p2", "p3", "n_clr", "t_max_rapid",
    "t_max_long", "t_max_gut", "f_carb", "Vg", "Vi", "sensitivity_factor",
)
DOSE_KINDS = ("rapid_bolus", "long_basal")

# Sampling ranges for synthetic cohorts.  Ib is not sampled directly; it is
# derived from a sampled daily basal requirement (U/kg/day, see sample_patient).
COHORT_RANGES = {
    "body_weight": (55.0, 95.0),
    "Gb": (110.0, 140.0),
    "p1": (0.01, 0.03),
    "p2": (0.01, 0.03),
    "p3": (1e-5, 5e-5),
    "n_clr": (0.1, 0.2),
    "t_max_rapid": (40.0, 70.0),
    "t_max_long": (500.0, 800.0),
    "t_max_gut": (30.0, 60.0),
    "f_carb": (0.8, 0.95),
    "Vg": (1.4, 1.8),
    "Vi": (110.0, 130.0),
}
BASAL_NEED_RANGE = (0.15, 0.7)
UNTREATED_CEILING_RANGE = (250.0, 800.0)
SCREEN_TOLERANCE = 5.0
SCREEN_WARMUP_DAYS = 6
MAX_RESAMPLES = 200


class SimulationError(RuntimeError):
    """Raised when the integrator produces a non-finite value."""

    def __init__(self, message: str, field: str | None = None, t: float | None = None):
        super().__init__(message)
        self.field = field
        self.t = t


@dataclass(frozen=True)
class PatientParams:
    body_weight: float
    Gb: float
    Ib: float
    p1: float
    p2: float
    p3: float
    n_clr: float
    t_max_rapid: float
    t_max_long: float
    t_max_gut: float
    f_carb: float
    Vg: float
    Vi: float
    sensitivity_factor: float = 1.0

    def __post_init__(self):
        for name in ("body_weight", "p1", "p2", "p3", "n_clr", "t_max_rapid",
                     "t_max_long", "t_max_gut", "Vg", "Vi"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0, got {value}")
        if not 0 < self.f_carb <= 1:
            raise ValueError(f"f_carb must lie in (0, 1], got {self.f_carb}")
        if not 0 < self.sensitivity_factor <= 1:
            raise ValueError(
                f"sensitivity_factor must lie in (0, 1], got {self.sensitivity_factor}")
        if not (self.Ib >= 0 and self.Gb > 0):
            raise ValueError("Ib must be >= 0 and Gb > 0")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PARAM_FIELDS], dtype=np.float64)


@dataclass(frozen=True)
class PatientState:
    G: float
    X: float = 0.0
    I: float = 0.0
    S1: float = 0.0
    S2: float = 0.0
    L1: float = 0.0
    L2: float = 0.0
    D1: float = 0.0
    D2: float = 0.0
    t: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STATE_FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, y: Sequence[float], t: float = 0.0) -> "PatientState":
        return cls(*(float(v) for v in y), t=float(t))


@dataclass(frozen=True)
class DoseEvent:
    t: float
    kind: str
    amount: float

    def __post_init__(self):
        if self.kind not in DOSE_KINDS:
            raise ValueError(f"unknown dose kind {self.kind!r}")
        if not (math.isfinite(self.amount) and self.amount >= 0):
            raise ValueError(f"dose amount must be finite and >= 0, got {self.amount}")


# --------------------------------------------------------------------------
# compiled kernels

@njit(cache=True, nogil=True)
def _rhs(y, p, meal_rate, rapid_in, long_in, dy):
    G, X, I, S1, S2, L1, L2, D1, D2 = y[0], y[1], y[2], y[3], y[4], y[5], y[6], y[7], y[8]
    bw, gb, ib = p[0], p[1], p[2]
    p1, p2, p3, n_clr = p[3], p[4], p[5], p[6]
    tr, tl, tg = p[7], p[8], p[9]
    f_carb, vg, vi, sf = p[10], p[11], p[12], p[13]
    dy[0] = -(p1 + X) * G + p1 * gb + G_TO_MG * f_carb * D2 / (tg * vg * bw)
    dy[1] = -p2 * X + p3 * (sf * I - ib)
    dy[2] = -n_clr * I + U_TO_MICRO_U * (S2 / tr + L2 / tl) / (vi * bw)
    dy[3] = rapid_in - S1 / tr
    dy[4] = (S1 - S2) / tr
    dy[5] = long_in - L1 / tl
    dy[6] = (L1 - L2) / tl
    dy[7] = meal_rate - D1 / tg
    dy[8] = (D1 - D2) / tg


@njit(cache=True, nogil=True)
def _rk4_step(y, p, meal_rate, rapid_in, long_in, dt, k1, k2, k3, k4, tmp):
    n = y.shape[0]
    _rhs(y, p, meal_rate, rapid_in, long_in, k1)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * dt * k1[i]
    _rhs(tmp, p, meal_rate, rapid_in, long_in, k2)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * dt * k2[i]
    _rhs(tmp, p, meal_rate, rapid_in, long_in, k3)
    for i in range(n):
        tmp[i] = y[i] + dt * k3[i]
    _rhs(tmp, p, meal_rate, rapid_in, long_in, k4)
    clamped = 0
    bad = -1
    for i in range(n):
        y[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if not np.isfinite(y[i]):
            bad = i
        # X is a signed deviation; every other compartment is a mass/concentration
        if i != 1 and y[i] < 0.0:
            y[i] = 0.0
            clamped += 1
    return clamped, bad


@njit(cache=True, nogil=True)
def _advance(y, p, meal, rapid, long_, dt, trace):
    """Advance len(meal) fixed steps in place.

    Writes the glucose value at the start of each step into ``trace``.
    Returns (clamp_count, failed_step, failed_field); failed_step is -1 on
    success.
    """
    n = y.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    clamps = 0
    for j in range(meal.shape[0]):
        trace[j] = y[0]
        c, bad = _rk4_step(y, p, meal[j], rapid[j], long_[j], dt, k1, k2, k3, k4, tmp)
        clamps += c
        if bad >= 0:
            return clamps, j, bad
    return clamps, -1, -1


# --------------------------------------------------------------------------
# single-step API

def _check_state(y: np.ndarray, t: float) -> None:
    for name, value in zip(STATE_FIELDS, y):
        if not math.isfinite(value):
            raise SimulationError(f"non-finite {name}={value} at t={t}", field=name, t=t)


def derivatives(state: PatientState, params: PatientParams, meal_rate: float = 0.0,
                rapid_in: float = 0.0, long_in: float = 0.0) -> PatientState:
    """Time derivative of every state field (``t`` component is 1)."""
    y = state.to_array()
    _check_state(y, state.t)
    if min(meal_rate, rapid_in, long_in) < 0:
        raise ValueError("inputs must be non-negative")
    dy = np.empty(len(STATE_FIELDS))
    _rhs(y, params.to_array(), float(meal_rate), float(rapid_in), float(long_in), dy)
    return PatientState.from_array(dy, t=1.0)


def step(state: PatientState, params: PatientParams,
         inputs: tuple[float, float, float] = (0.0, 0.0, 0.0), dt: float = 1.0) -> PatientState:
    """One RK4 step of length ``dt`` minutes.

    ``inputs`` is ``(meal_rate g/min, rapid_in U/min, long_in U/min)``, held
    constant over the step.  Negative compartments are clamped to zero.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    meal_rate, rapid_in, long_in = (float(v) for v in inputs)
    if min(meal_rate, rapid_in, long_in) < 0:
        raise ValueError("inputs must be non-negative")
    y = state.to_array()
    _check_state(y, state.t)
    trace = np.empty(1)
    _, failed, field = _advance(y, params.to_array(), np.array([meal_rate]),
                                np.array([rapid_in]), np.array([long_in]), float(dt), trace)
    if failed >= 0:
        name = STATE_FIELDS[field]
        raise SimulationError(f"non-finite {name} after step at t={state.t}",
                              field=name, t=state.t)
    return PatientState.from_array(y, t=state.t + dt)


def equilibrium_basal_rate(params: PatientParams) -> float:
    """Long-acting infusion rate (U/min) holding fasting glucose at Gb."""
    i_ss = params.Ib / params.sensitivity_factor
    return params.n_clr * i_ss * params.Vi * params.body_weight / U_TO_MICRO_U


def fasting_equilibrium(params: PatientParams) -> PatientState:
    """Fixed point under a constant long-acting infusion of equilibrium_basal_rate."""
    u = equilibrium_basal_rate(params)
    depot = u * params.t_max_long
    return PatientState(G=params.Gb, X=0.0, I=params.Ib / params.sensitivity_factor,
                        L1=depot, L2=depot)


def untreated_ceiling(params: PatientParams) -> float:
    """Fasting glucose approached with no plasma insulin at all."""
    floor = params.p1 - params.p3 * params.Ib / params.p2
    return math.inf if floor <= 0 else params.p1 * params.Gb / floor


def apply_insulin_resistance(params: PatientParams, reduction: float) -> PatientParams:
    """Return a copy whose insulin action is scaled by ``1 - reduction``."""
    if not 0 <= reduction < 1:
        raise ValueError(f"reduction must lie in [0, 1), got {reduction}")
    return replace(params, sensitivity_factor=1.0 - reduction)


# --------------------------------------------------------------------------
# closed loop

class ClosedLoop:
    """Minute-resolution closed-loop environment for one patient.

    Time ``t`` counts simulated minutes since 07:00 of day 0.  Doses injected
    at minute ``t`` are delivered over that minute; meals starting at ``t``
    are absorbed into the gut over the following 15 minutes.
    """

    def __init__(self, params: PatientParams, meal_plan=None, days: float = 14,
                 initial_state: PatientState | None = None):
        if days <= 0:
            raise ValueError("days must be > 0")
        self.params = params
        self._p = params.to_array()
        self.n_minutes = int(round(days * MIN_PER_DAY))
        n = self.n_minutes
        self.meal_rate = np.zeros(n)
        self.rapid_in = np.zeros(n)
        self.long_in = np.zeros(n)
        self.trace = np.empty(n)
        self.meal_onsets = np.zeros(n)
        self.meals: list[tuple[int, float]] = []
        self.doses: list[DoseEvent] = []
        self.clamp_count = 0
        state = initial_state or PatientState(G=INITIAL_GLUCOSE)
        self._y = state.to_array()
        self.t = 0
        if meal_plan is not None:
            for minute, carbs in meal_plan.sim_minutes(n):
                self.add_meal(minute, carbs)

    # -- inputs
    def add_meal(self, minute: int, carbs: float) -> None:
        if carbs < 0:
            raise ValueError("carbs must be >= 0")
        if not 0 <= minute < self.n_minutes:
            return
        self.meals.append((minute, float(carbs)))
        self.meal_onsets[minute] += carbs
        end = min(minute + MEAL_SPREAD_MIN, self.n_minutes)
        self.meal_rate[minute:end] += carbs / MEAL_SPREAD_MIN

    def inject(self, kind: str, units: float) -> None:
        """Deliver ``units`` of insulin over the current minute."""
        event = DoseEvent(float(self.t), kind, float(units))
        if units == 0:
            return
        if self.t >= self.n_minutes:
            raise RuntimeError("simulation already finished")
        target = self.rapid_in if kind == "rapid_bolus" else self.long_in
        target[self.t] += units
        self.doses.append(event)

    # -- observation
    @property
    def glucose(self) -> float:
        return float(self._y[0])

    @property
    def state(self) -> PatientState:
        return PatientState.from_array(self._y, t=self.t)

    @property
    def done(self) -> bool:
        return self.t >= self.n_minutes

    @property
    def minute_of_day(self) -> int:
        return (START_MINUTE + self.t) % MIN_PER_DAY

    @property
    def day(self) -> int:
        return (START_MINUTE + self.t) // MIN_PER_DAY

    def carbs_between(self, t0: int, t1: int) -> float:
        """Total carbs of meals starting in ``[t0, t1)``."""
        t0 = max(t0, 0)
        t1 = min(t1, self.n_minutes)
        return float(self.meal_onsets[t0:t1].sum()) if t1 > t0 else 0.0

    def iob(self) -> float:
        return float(self._y[3] + self._y[4])

    def glucose_window(self, t0: int, t1: int, pad: float = INITIAL_GLUCOSE) -> np.ndarray:
        """Recorded glucose for minutes ``[t0, t1)``; minutes before 0 are padded."""
        out = np.full(t1 - t0, pad, dtype=np.float64)
        lo = max(t0, 0)
        hi = min(t1, self.t)
        if hi > lo:
            out[lo - t0:hi - t0] = self.trace[lo:hi]
        if t1 > self.t >= t0:
            out[self.t - t0] = self.glucose
        return out

    # -- dynamics
    def advance(self, minutes: int) -> None:
        stop = min(self.t + int(minutes), self.n_minutes)
        if stop <= self.t:
            return
        sl = slice(self.t, stop)
        clamps, failed, field = _advance(self._y, self._p, self.meal_rate[sl],
                                         self.rapid_in[sl], self.long_in[sl], 1.0,
                                         self.trace[sl])
        self.clamp_count += clamps
        if failed >= 0:
            name = STATE_FIELDS[field]
            when = self.t + failed
            raise SimulationError(f"simulator diverged: non-finite {name} at t={when} min",
                                  field=name, t=when)
        self.t = stop


Controller = Callable[[ClosedLoop], Iterable[tuple[str, float]]]


@dataclass
class SimulationResult:
    trace: np.ndarray
    doses: list[DoseEvent]
    meals: list[tuple[int, float]]
    clamp_count: int = 0

    @property
    def minutes(self) -> np.ndarray:
        return np.arange(len(self.trace))


def simulate(params: PatientParams, meal_plan, controller: Controller, days: float = 14,
             seed: int | None = None) -> SimulationResult:
    """Run ``controller`` in closed loop from the protocol initial condition.

    The controller is called as ``controller(loop)`` every ``controller.cadence``
    minutes (default 1) and returns ``(kind, units)`` pairs to inject now.
    """
    if days < 1:
        raise ValueError("duration must be at least one day")
    loop = ClosedLoop(params, meal_plan, days)
    loop.rng = np.random.default_rng(seed)
    cadence = int(getattr(controller, "cadence", 1))
    if hasattr(controller, "reset"):
        controller.reset()
    while not loop.done:
        for kind, units in controller(loop) or ():
            if not (math.isfinite(units) and units >= 0):
                raise ValueError(f"controller returned invalid dose {units!r} at t={loop.t}")
            loop.inject(kind, units)
        loop.advance(cadence)
    return SimulationResult(loop.trace.copy(), list(loop.doses), list(loop.meals),
                            loop.clamp_count)


def zero_controller(loop: ClosedLoop):
    return ()


zero_controller.cadence = MIN_PER_DAY


# --------------------------------------------------------------------------
# cohorts

def fasting_screen(params: PatientParams, days: int = SCREEN_WARMUP_DAYS) -> float:
    """Fasting-stability score in mg/dL (a patient passes below SCREEN_TOLERANCE).

    Worst of two checks: the max |G - Gb| over 24 h from the fasting
    equilibrium under the constant equilibrium infusion, and the daily mean
    |G - Gb| once the same daily amount is given as a single 07:00 injection
    (periodic state after ``days - 1`` warm-up days).  Patients whose fasting
    glucose without any insulin falls outside UNTREATED_CEILING_RANGE score inf.
    """
    lo, hi = UNTREATED_CEILING_RANGE
    if not lo <= untreated_ceiling(params) <= hi:
        return math.inf
    rate = equilibrium_basal_rate(params)
    loop = ClosedLoop(params, None, 1, initial_state=fasting_equilibrium(params))
    loop.long_in[:] = rate
    loop.advance(MIN_PER_DAY)
    drift = float(np.max(np.abs(loop.trace - params.Gb)))

    loop = ClosedLoop(params, None, days, initial_state=fasting_equilibrium(params))
    while not loop.done:
        loop.inject("long_basal", rate * MIN_PER_DAY)
        loop.advance(MIN_PER_DAY)
    shift = abs(float(np.mean(loop.trace[-MIN_PER_DAY:])) - params.Gb)
    return max(drift, shift)


def sample_patient(rng: np.random.Generator) -> PatientParams:
    values = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in COHORT_RANGES.items()}
    need = float(rng.uniform(*BASAL_NEED_RANGE))
    # plasma insulin sustained by a long-acting supply of `need` U/kg/day
    values["Ib"] = need * U_TO_MICRO_U / (MIN_PER_DAY * values["n_clr"] * values["Vi"])
    return PatientParams(**values)


def make_cohort(n: int, seed: int) -> list[PatientParams]:
    """Seeded synthetic cohort; every patient passes the fasting screen."""
    if n < 1:
        raise ValueError(f"cohort size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    cohort = []
    for _ in range(n):
        for _attempt in range(MAX_RESAMPLES):
            candidate = sample_patient(rng)
            if fasting_screen(candidate) < SCREEN_TOLERANCE:
                cohort.append(candidate)
                break
        else:
            raise RuntimeError(f"no patient passed the fasting screen in {MAX_RESAMPLES} draws")
    return cohort


def save_cohort(cohort: Sequence[PatientParams], path: str | Path) -> None:
    doc = {
        "format": "bbadvisor-cohort/1",
        "units": {
            "body_weight": "kg", "Gb": "mg/dL", "Ib": "uU/mL", "p1": "1/min",
            "p2": "1/min", "p3": "mL/(uU*min^2)", "n_clr": "1/min",
            "t_max_rapid": "min", "t_max_long": "min", "t_max_gut": "min",
            "f_carb": "fraction", "Vg": "dL/kg", "Vi": "mL/kg",
            "sensitivity_factor": "multiplier on insulin action",
        },
        "patients": [
            {"id": i, **{k: float(v) for k, v in asdict(p).items()}}
            for i, p in enumerate(cohort)
        ],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_cohort(path: str | Path) -> list[PatientParams]:
    doc = yaml.safe_load(Path(path).read_text())
    names = {f.name for f in fields(PatientParams)}
    return [PatientParams(**{k: float(v) for k, v in p.items() if k in names})
            for p in doc["patients"]]


def write_trace_csv(trace: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min", "glucose_mgdl"])
        for t, g in enumerate(trace):
            w.writerow([t, repr(float(g))])


def write_doses_csv(doses: Iterable[DoseEvent], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_min", "kind", "units"])
        for d in doses:
            w.writerow([int(d.t), d.kind, repr(float(d.amount))])


def read_trace_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["glucose_mgdl"]) for r in rows])


def read_doses_csv(path: str | Path) -> list[DoseEvent]:
    with open(path, newline="") as fh:
        return [DoseEvent(float(r["t_min"]), r["kind"], float(r["units"]))
                for r in csv.DictReader(fh)]
