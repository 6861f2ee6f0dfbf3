"""
Cart-Pendulum Plant - Nonlinear Dynamics
Implements: equations of motion, fixed-step RK4 integration, energy and
reaction-force diagnostics for a pendulum hinged on a cart.

Angle convention: theta = 0 hangs down, theta = pi is upright.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DivergedError, InputDomainError

logger = logging.getLogger(__name__)

MAX_DT = 0.05
MAX_THETA_DOT = 1.0e3


@dataclass(frozen=True)
class PlantParams:
    """
    Physical constants of the cart-pendulum

    M: cart mass (kg)            m: pendulum mass (kg)
    b: cart friction (N*s/m)     l: pivot to centre of mass (m)
    I: pendulum inertia (kg*m^2) g: gravity (m/s^2)

    Defaults are the reference parameter set used throughout the tests.
    """
    M: float = 0.5
    m: float = 0.2
    b: float = 0.1
    l: float = 0.3
    I: float = 0.006
    g: float = 9.81

    def __post_init__(self):
        for name in ("M", "m", "b", "l", "I", "g"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError("must be a number", field=name)
            if not math.isfinite(value):
                raise ConfigError("must be finite", field=name)
        for name in ("M", "l", "g"):
            if getattr(self, name) <= 0:
                raise ConfigError("must be > 0", field=name)
        for name in ("m", "I", "b"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", field=name)
        if self.q <= 0:
            raise ConfigError(f"q = {self.q!r} is not positive")

    @property
    def q(self) -> float:
        """(M+m)(I+ml^2) - (ml)^2, the smallest value the mass-matrix determinant takes"""
        ml = self.m * self.l
        return (self.M + self.m) * (self.I + ml * self.l) - ml * ml


@dataclass(frozen=True)
class PlantState:
    x: float = 0.0
    x_dot: float = 0.0
    theta: float = math.pi
    theta_dot: float = 0.0

    @property
    def phi(self) -> float:
        """Deviation from upright"""
        return self.theta - math.pi

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.x_dot, self.theta, self.theta_dot)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_tuple())

    @classmethod
    def upright(cls, phi: float = 0.0, x: float = 0.0) -> "PlantState":
        return cls(x=x, x_dot=0.0, theta=math.pi + phi, theta_dot=0.0)


@dataclass(frozen=True)
class StateDeriv:
    x_dot: float
    x_ddot: float
    theta_dot: float
    theta_ddot: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_dot, self.x_ddot, self.theta_dot, self.theta_ddot)


@dataclass(frozen=True)
class ForceCommand:
    """Horizontal force on the cart (N, positive along +x)"""
    force: float = 0.0

    def clamped(self, limit: float) -> "ForceCommand":
        return ForceCommand(min(limit, max(-limit, self.force)))


def _trig(theta: float) -> Tuple[float, float]:
    """
    sin and cos of theta, reduced about the nearest multiple of pi

    Both equilibria (0 and math.pi) then give an exactly zero sine.
    """
    k = round(theta / math.pi)
    delta = theta - k * math.pi
    sign = -1.0 if k % 2 else 1.0
    return sign * math.sin(delta), sign * math.cos(delta)


def _accel(p: PlantParams, x_dot: float, theta: float, theta_dot: float,
           force: float) -> Tuple[float, float]:
    # (M+m) xdd + ml cos th thdd = F - b xd + ml thd^2 sin th
    # ml cos th xdd + (I+ml^2) thdd = -mgl sin th
    s, c = _trig(theta)
    ml = p.m * p.l
    a11 = p.M + p.m
    a12 = ml * c
    a22 = p.I + ml * p.l
    r1 = force - p.b * x_dot + ml * theta_dot * theta_dot * s
    r2 = -ml * p.g * s
    det = a11 * a22 - a12 * a12
    return (r1 * a22 - a12 * r2) / det, (a11 * r2 - a12 * r1) / det


def _require_finite(state: PlantState, cmd: ForceCommand) -> None:
    if not state.is_finite():
        raise InputDomainError(f"non-finite state {state}")
    if not math.isfinite(cmd.force):
        raise InputDomainError(f"non-finite force {cmd.force!r}")


def deriv(params: PlantParams, state: PlantState, cmd: ForceCommand) -> StateDeriv:
    """Time derivative of the full nonlinear model"""
    _require_finite(state, cmd)
    x_ddot, theta_ddot = _accel(params, state.x_dot, state.theta, state.theta_dot, cmd.force)
    return StateDeriv(state.x_dot, x_ddot, state.theta_dot, theta_ddot)


def simplified_deriv(params: PlantParams, state: PlantState, cmd: ForceCommand) -> StateDeriv:
    """
    Reduced nonlinear model with a point-mass pendulum and a frictionless cart

        (M+m) xdd + ml chdd cos ch - ml chd^2 sin ch = F
        l chdd + xdd cos ch - g sin ch = 0

    written for ch = pi - theta, the angle from upright turning the other way.
    I and b are ignored; with I = b = 0 the result equals deriv().
    """
    _require_finite(state, cmd)
    p = params
    s, c = _trig(math.pi - state.theta)
    chi_dot = -state.theta_dot
    ml = p.m * p.l
    a11 = p.M + p.m
    r1 = cmd.force + ml * chi_dot * chi_dot * s
    r2 = p.g * s
    det = a11 * p.l - ml * c * c
    x_ddot = (r1 * p.l - ml * c * r2) / det
    chi_ddot = (a11 * r2 - c * r1) / det
    return StateDeriv(state.x_dot, x_ddot, state.theta_dot, -chi_ddot)


def rk4_step(params: PlantParams, state: PlantState, cmd: ForceCommand, dt: float) -> PlantState:
    """
    One classical Runge-Kutta step with the force held over the step

    Args:
        dt: step in seconds, 0 < dt <= 0.05

    Returns:
        State after dt. Bit-identical for identical inputs.
    """
    if not (0.0 < dt <= MAX_DT):
        raise ConfigError(f"dt must be in (0, {MAX_DT}], got {dt!r}", field="dt")
    _require_finite(state, cmd)
    p = params
    F = cmd.force
    x, v, th, w = state.x, state.x_dot, state.theta, state.theta_dot
    h = 0.5 * dt

    a1, al1 = _accel(p, v, th, w, F)
    v2, w2 = v + h * a1, w + h * al1
    a2, al2 = _accel(p, v2, th + h * w, w2, F)
    v3, w3 = v + h * a2, w + h * al2
    a3, al3 = _accel(p, v3, th + h * w2, w3, F)
    v4, w4 = v + dt * a3, w + dt * al3
    a4, al4 = _accel(p, v4, th + dt * w3, w4, F)

    k = dt / 6.0
    return PlantState(
        x=x + k * (v + 2.0 * v2 + 2.0 * v3 + v4),
        x_dot=v + k * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
        theta=th + k * (w + 2.0 * w2 + 2.0 * w3 + w4),
        theta_dot=w + k * (al1 + 2.0 * al2 + 2.0 * al3 + al4),
    )


def energy(params: PlantParams, state: PlantState) -> float:
    """Kinetic plus potential energy (J); the pivot height is the zero of potential"""
    p = params
    s, c = _trig(state.theta)
    lw = p.l * state.theta_dot
    vx = state.x_dot + lw * c
    vy = lw * s
    return (0.5 * p.M * state.x_dot ** 2
            + 0.5 * p.m * (vx * vx + vy * vy)
            + 0.5 * p.I * state.theta_dot ** 2
            - p.m * p.g * p.l * c)


def normal_reaction(params: PlantParams, state: PlantState, d: StateDeriv) -> float:
    """
    Horizontal pivot force N between pendulum and cart

    The theta_ddot term carries the sign that keeps M*xdd + b*xd + N = F
    consistent with deriv().
    """
    s, c = _trig(state.theta)
    ml = params.m * params.l
    return params.m * d.x_ddot + ml * d.theta_ddot * c - ml * state.theta_dot ** 2 * s


@dataclass(frozen=True)
class Rollout:
    """
    Open-loop integration record

    Row 0 is the initial state; row k+1 is the state after force k.
    """
    dt: float
    states: np.ndarray      # (n+1, 4): x, x_dot, theta, theta_dot
    forces: np.ndarray      # (n,)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    def state(self, k: int) -> PlantState:
        return PlantState(*(float(v) for v in self.states[k]))

    def energies(self, params: PlantParams) -> np.ndarray:
        return np.array([energy(params, self.state(k)) for k in range(len(self.states))])


def rollout(params: PlantParams, forces: Sequence, dt: float,
            initial: PlantState = PlantState()) -> Rollout:
    """
    Integrate a force sequence from `initial`

    Raises:
        DivergedError: state became non-finite or |theta_dot| exceeded 1e3 rad/s
    """
    if len(forces) == 0:
        raise InputDomainError("force sequence is empty")
    cmds: List[ForceCommand] = [f if isinstance(f, ForceCommand) else ForceCommand(float(f))
                                for f in forces]
    rows = [initial.as_tuple()]
    state = initial
    for k, cmd in enumerate(cmds):
        state = rk4_step(params, state, cmd, dt)
        if not state.is_finite() or abs(state.theta_dot) > MAX_THETA_DOT:
            logger.warning("rollout diverged at step %d: %s", k, state)
            raise DivergedError(k, f"state left the bounded region: {state}")
        rows.append(state.as_tuple())
    return Rollout(dt=dt, states=np.array(rows), forces=np.array([c.force for c in cmds]))
