"""
Trajectory Metrics
Settling time, peak deviation, overshoot and actuator effort of one run.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .errors import InputDomainError
from .scenario import FALL_ANGLE, Status, Trajectory

DEFAULT_TOLERANCE = 0.005


@dataclass(frozen=True)
class Metrics:
    """
    settling_time is None when the run ends outside the tolerance band.
    overshoot is the largest excursion past upright, relative to |phi0|.
    """
    settling_time: Optional[float]
    peak_phi: float
    overshoot: float
    rms_u: float
    fell: bool
    miss_count: int
    status: Status
    duration: float
    tolerance: float

    def to_dict(self, degrees: bool = False) -> Dict:
        angle = math.degrees if degrees else float
        return {
            "status": self.status.value,
            "duration": self.duration,
            "settling_time": self.settling_time,
            "peak_phi": angle(self.peak_phi),
            "overshoot": self.overshoot,
            "rms_u": self.rms_u,
            "fell": self.fell,
            "miss_count": self.miss_count,
            "tolerance": angle(self.tolerance),
            "angle_unit": "deg" if degrees else "rad",
        }


def compute_metrics(traj: Trajectory, tolerance: float = DEFAULT_TOLERANCE,
                    phi0: Optional[float] = None) -> Metrics:
    """
    Args:
        tolerance: settling band on |phi| in rad
        phi0: initial deviation; defaults to phi of the first row
    """
    if not traj.rows:
        raise InputDomainError("trajectory has no rows")
    if not tolerance > 0:
        raise InputDomainError(f"tolerance must be > 0, got {tolerance!r}")
    phi = traj.column("phi")
    t = traj.column("t")
    u = traj.column("u_applied")
    if phi0 is None:
        phi0 = float(phi[0])

    outside = np.flatnonzero(~(np.abs(phi) < tolerance))
    if outside.size == 0:
        settling: Optional[float] = 0.0
    elif outside[-1] == len(phi) - 1:
        settling = None
    else:
        settling = float(t[outside[-1] + 1])

    finite_phi = phi[np.isfinite(phi)]
    peak = float(np.max(np.abs(finite_phi))) if finite_phi.size else math.inf
    if phi0 == 0 or not finite_phi.size:
        overshoot = 0.0
    else:
        past = -math.copysign(1.0, phi0) * finite_phi
        overshoot = max(0.0, float(np.max(past))) / abs(phi0)

    finite_u = u[np.isfinite(u)]
    rms = float(np.sqrt(np.mean(finite_u ** 2))) if finite_u.size else 0.0
    fell = traj.status is Status.FELL or not abs(phi[-1]) <= FALL_ANGLE

    return Metrics(settling_time=settling, peak_phi=peak, overshoot=overshoot, rms_u=rms,
                   fell=bool(fell), miss_count=traj.miss_count, status=traj.status,
                   duration=traj.duration, tolerance=tolerance)
