"""
Scenario & Trajectory - Episode Definition and Run Log
Implements: scenario validation, the plant side of an episode (noise,
disturbances, safety guards) and the trajectory CSV format.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, CsvFormatError
from .plant import MAX_THETA_DOT, ForceCommand, PlantParams, PlantState, rk4_step

logger = logging.getLogger(__name__)

CSV_HEADER = ["step", "t", "x", "x_dot", "theta", "phi", "u_cmd", "u_applied", "seq", "miss"]
FALL_ANGLE = math.pi / 2


class Status(str, Enum):
    COMPLETED = "completed"
    FELL = "fell"
    DIVERGED = "diverged"
    ABORTED = "aborted"
    OFF_TRACK = "off_track"


@dataclass(frozen=True)
class Disturbance:
    """Additive push on the cart: `force` N from `time` for `duration` s"""
    time: float
    force: float
    duration: float

    def __post_init__(self):
        for name in ("time", "force", "duration"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError("must be finite", field=name)
        if self.duration < 0:
            raise ConfigError("must be >= 0", field="duration")

    def active(self, t: float) -> bool:
        return self.time <= t < self.time + self.duration


DEFAULT_DISTURBANCES = (Disturbance(time=3.0, force=2.0, duration=0.1),)


@dataclass(frozen=True)
class Scenario:
    """
    One closed-loop episode

    `period` is the control period Tc and must be an integer multiple of the
    physics step `dt`, and `duration` a whole number of periods. The defaults
    are the acceptance setup: 0.05 rad off upright, 10 s, and a 2 N push for
    0.1 s at t = 3 s.
    """
    initial: PlantState = field(default_factory=lambda: PlantState.upright(0.05))
    duration: float = 10.0
    dt: float = 0.001
    period: float = 0.01
    disturbances: Tuple[Disturbance, ...] = DEFAULT_DISTURBANCES
    noise_std: float = 0.0
    seed: int = 0
    track_limit: float = 2.5
    actuator_limit: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "disturbances", tuple(self.disturbances))
        if not self.initial.is_finite():
            raise ConfigError("must be finite", field="initial")
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ConfigError("must be > 0", field="duration")
        if not (0.0 < self.dt <= 0.05):
            raise ConfigError("must be in (0, 0.05]", field="dt")
        if not (math.isfinite(self.period) and self.period > 0):
            raise ConfigError("must be > 0", field="period")
        n = round(self.period / self.dt)
        if n < 1 or abs(n * self.dt - self.period) > 1e-9 * self.period:
            raise ConfigError(f"control period {self.period} is not a multiple of dt {self.dt}",
                              field="period")
        ticks = round(self.duration / self.period)
        if ticks < 1 or abs(ticks * self.period - self.duration) > 1e-9 * self.duration:
            raise ConfigError(f"duration {self.duration} is not a multiple of the control period "
                              f"{self.period}", field="duration")
        for i, d in enumerate(self.disturbances):
            if not (0.0 <= d.time <= self.duration):
                raise ConfigError("must lie within [0, duration]", field=f"disturbances[{i}].time")
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            raise ConfigError("must be >= 0", field="noise_std")
        if not self.track_limit > 0:
            raise ConfigError("must be > 0", field="track_limit")
        if not self.actuator_limit > 0:
            raise ConfigError("must be > 0", field="actuator_limit")

    @property
    def substeps(self) -> int:
        return round(self.period / self.dt)

    @property
    def n_ticks(self) -> int:
        return round(self.duration / self.period)

    def disturbance_force(self, t: float) -> float:
        total = 0.0
        for d in self.disturbances:
            if d.active(t):
                total += d.force
        return total


@dataclass(frozen=True)
class TrajectoryRow:
    step: int
    t: float
    x: float
    x_dot: float
    theta: float
    phi: float
    u_cmd: float
    u_applied: float
    seq: int
    miss: bool = False

    def state_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.x_dot, self.theta, self.phi)


@dataclass
class Trajectory:
    """
    Time-indexed run log; row k holds the state after physics step k

    The force columns are the command held during that step.
    """
    rows: List[TrajectoryRow] = field(default_factory=list)
    status: Status = Status.COMPLETED

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def dt(self) -> Optional[float]:
        if not self.rows:
            return None
        first = self.rows[0]
        return first.t / first.step

    @property
    def duration(self) -> float:
        return self.rows[-1].t if self.rows else 0.0

    @property
    def miss_count(self) -> int:
        # one miss per control tick, not per physics row
        return len({r.seq for r in self.rows if r.miss})


class PlantRunner:
    """
    Plant side of an episode

    Holds the state, samples the (optionally noisy) angle sensor once per
    control tick, integrates one control period under zero-order hold and
    appends trajectory rows. Every binding drives the plant through this class
    so their arithmetic is identical.
    """

    def __init__(self, params: PlantParams, scenario: Scenario):
        self.params = params
        self.scenario = scenario
        self.state = scenario.initial
        self.step = 0
        self.rows: List[TrajectoryRow] = []
        self.status: Optional[Status] = None
        self._rng = np.random.default_rng(scenario.seed)

    def ticks(self) -> range:
        return range(self.scenario.n_ticks)

    @property
    def time(self) -> float:
        return self.step * self.scenario.dt

    @property
    def finished(self) -> bool:
        return self.status is not None

    def measure(self) -> PlantState:
        """State as the sensor reports it; noise only touches theta"""
        if self.scenario.noise_std > 0:
            noise = self.scenario.noise_std * float(self._rng.standard_normal())
            s = self.state
            return PlantState(s.x, s.x_dot, s.theta + noise, s.theta_dot)
        return self.state

    def reset(self, state: PlantState) -> None:
        logger.info("plant state reset at t=%.6f to %s", self.time, state)
        self.state = state

    def advance(self, u_cmd: float, u_applied: float, seq: int, miss: bool = False) -> bool:
        """
        Integrate one control period

        Returns:
            True when the episode ended during this period
        """
        sc = self.scenario
        force = ForceCommand(u_applied).clamped(sc.actuator_limit).force
        for _ in range(sc.substeps):
            push = sc.disturbance_force(self.step * sc.dt)
            self.state = rk4_step(self.params, self.state, ForceCommand(force + push), sc.dt)
            self.step += 1
            s = self.state
            self.rows.append(TrajectoryRow(
                step=self.step, t=self.step * sc.dt,
                x=s.x, x_dot=s.x_dot, theta=s.theta, phi=s.phi,
                u_cmd=u_cmd, u_applied=force, seq=seq, miss=miss,
            ))
            status = self._check(s)
            if status is not None:
                self.finish(status)
                return True
        return False

    def _check(self, s: PlantState) -> Optional[Status]:
        if not s.is_finite() or abs(s.theta_dot) > MAX_THETA_DOT:
            return Status.DIVERGED
        if abs(s.phi) > FALL_ANGLE:
            return Status.FELL
        if abs(s.x) > self.scenario.track_limit:
            return Status.OFF_TRACK
        return None

    def finish(self, status: Status) -> None:
        if self.status is None:
            self.status = status
            if status is not Status.COMPLETED:
                logger.info("episode ended at t=%.3f: %s", self.time, status.value)

    def trajectory(self) -> Trajectory:
        return Trajectory(rows=list(self.rows), status=self.status or Status.COMPLETED)


def _fmt(v: float) -> str:
    return format(v, ".17g")


def write_csv(traj: Trajectory, path: Union[str, Path]) -> None:
    """Write rows with 17 significant digits so read_csv restores them exactly"""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in traj.rows:
            w.writerow([r.step, _fmt(r.t), _fmt(r.x), _fmt(r.x_dot), _fmt(r.theta), _fmt(r.phi),
                        _fmt(r.u_cmd), _fmt(r.u_applied), r.seq, int(r.miss)])


def _infer_status(rows: List[TrajectoryRow]) -> Status:
    if not rows:
        return Status.COMPLETED
    last = rows[-1]
    if not all(math.isfinite(v) for v in last.state_tuple()):
        return Status.DIVERGED
    if abs(last.phi) > FALL_ANGLE:
        return Status.FELL
    return Status.COMPLETED


def read_csv(path: Union[str, Path]) -> Trajectory:
    """
    Inverse of write_csv

    The file holds rows only, so the status is inferred from the last row
    (fell / diverged / completed).
    """
    rows: List[TrajectoryRow] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise CsvFormatError(1, f"expected header {','.join(CSV_HEADER)}, got {header}")
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_HEADER):
                raise CsvFormatError(line_no, f"expected {len(CSV_HEADER)} fields, got {len(rec)}")
            try:
                miss = int(rec[9])
                if miss not in (0, 1):
                    raise ValueError(f"miss must be 0 or 1, got {rec[9]!r}")
                rows.append(TrajectoryRow(
                    step=int(rec[0]), t=float(rec[1]), x=float(rec[2]), x_dot=float(rec[3]),
                    theta=float(rec[4]), phi=float(rec[5]), u_cmd=float(rec[6]),
                    u_applied=float(rec[7]), seq=int(rec[8]), miss=bool(miss),
                ))
            except ValueError as e:
                raise CsvFormatError(line_no, str(e)) from e
    return Trajectory(rows=rows, status=_infer_status(rows))
