"""
PID Control - Discrete Controller, Actuator Filter and Gain Tuner
Implements: parallel-form discrete PID with a filtered derivative and
conditional anti-windup, a first-order actuator low-pass, ISE gain tuning
against the linear model, and the in-process reference closed loop.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import control as ctrl
import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from .errors import ConfigError, ControllerFault, TuningFailedError
from .linmodel import StateSpaceModel
from .plant import ForceCommand, PlantParams
from .scenario import PlantRunner, Scenario, Status, Trajectory

logger = logging.getLogger(__name__)


def _finite(value: float, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"must be a finite number, got {value!r}", field=name)
    return float(value)


@dataclass(frozen=True)
class PidGains:
    """kp in N/rad, ki in N/(rad*s), kd in N*s/rad; the sign lives in the error"""
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            if _finite(getattr(self, name), name) < 0:
                raise ConfigError("must be >= 0", field=name)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.kp, self.ki, self.kd)


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0       # rad*s
    derivative: float = 0.0     # filtered de/dt, rad/s
    prev_error: float = 0.0
    initialized: bool = False


@dataclass(frozen=True)
class LowPassState:
    output: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        if _finite(self.tau, "tau") < 0:
            raise ConfigError("must be >= 0", field="tau")


@dataclass(frozen=True)
class ControllerConfig:
    """
    Controller settings

    period is the control period Tc; derivative_filter is the time constant of
    the first-order filter on the backward difference (0 disables it).
    """
    gains: PidGains = field(default_factory=PidGains)
    setpoint: float = 0.0
    period: float = 0.01
    derivative_filter: float = 0.01
    integral_limit: float = 1.0
    saturation: float = 50.0
    lowpass_tau: float = 0.005

    def __post_init__(self):
        _finite(self.setpoint, "setpoint")
        if _finite(self.period, "period") <= 0:
            raise ConfigError("must be > 0", field="period")
        if _finite(self.derivative_filter, "derivative_filter") < 0:
            raise ConfigError("must be >= 0", field="derivative_filter")
        if not (self.integral_limit > 0):
            raise ConfigError("must be > 0", field="integral_limit")
        if _finite(self.saturation, "saturation") <= 0:
            raise ConfigError("must be > 0", field="saturation")
        if _finite(self.lowpass_tau, "lowpass_tau") < 0:
            raise ConfigError("must be >= 0", field="lowpass_tau")


def _clamp(value: float, limit: float) -> float:
    return min(limit, max(-limit, value))


def pid_step(state: PidState, cfg: ControllerConfig, phi: float) -> Tuple[ForceCommand, PidState]:
    """
    One controller update at period cfg.period

    e = setpoint - phi. The integral adds e*Tc before the output is formed;
    if the output saturates the integral keeps its previous value. The first
    call after a reset has no derivative term.

    Raises:
        ControllerFault: phi is not finite
    """
    if not math.isfinite(phi):
        raise ControllerFault(f"non-finite measurement {phi!r}")
    g = cfg.gains
    tc = cfg.period
    error = cfg.setpoint - phi

    integral = _clamp(state.integral + error * tc, cfg.integral_limit)

    if state.initialized:
        raw = (error - state.prev_error) / tc
        alpha = cfg.derivative_filter / (cfg.derivative_filter + tc)
        derivative = alpha * state.derivative + (1.0 - alpha) * raw
    else:
        derivative = 0.0

    u_raw = g.kp * error + g.ki * integral + g.kd * derivative
    if abs(u_raw) > cfg.saturation:
        integral = state.integral
    u = _clamp(u_raw, cfg.saturation)

    return ForceCommand(u), PidState(integral=integral, derivative=derivative,
                                     prev_error=error, initialized=True)


def lowpass_step(state: LowPassState, u: float, dt: float) -> Tuple[float, LowPassState]:
    """y <- y + beta (u - y), beta = dt / (tau + dt)"""
    if not dt > 0:
        raise ConfigError("must be > 0", field="dt")
    if state.tau == 0.0:
        y = u
    else:
        beta = dt / (state.tau + dt)
        y = state.output + beta * (u - state.output)
    return y, replace(state, output=y)


class Controller:
    """
    Stateful wrapper used by every binding

    update() maps a measured angle theta to (u_cmd, u_applied): u_cmd is the
    PID output, u_applied the low-passed and saturated force.
    """

    def __init__(self, cfg: ControllerConfig):
        self.cfg = cfg
        self.reset()

    def reset(self) -> None:
        self.pid = PidState()
        self.lowpass = LowPassState(tau=self.cfg.lowpass_tau)

    def update(self, theta: float) -> Tuple[float, float]:
        cmd, self.pid = pid_step(self.pid, self.cfg, theta - math.pi)
        y, self.lowpass = lowpass_step(self.lowpass, cmd.force, self.cfg.period)
        return cmd.force, _clamp(y, self.cfg.saturation)


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not (0 <= self.lo <= self.hi) or not math.isfinite(self.hi):
            raise ConfigError(f"need 0 <= lo <= hi, got [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class TuningConfig:
    """
    Search space and cost for tune()

    Each gain is searched on np.linspace(lo, hi, points); refine_iters rounds of
    coordinate descent follow, starting at the grid step and halving it when no
    axis improves. Feasible gains put every closed-loop pole left of
    -stability_margin.
    """
    kp: GainRange = GainRange(0.0, 300.0)
    ki: GainRange = GainRange(0.0, 300.0)
    kd: GainRange = GainRange(0.0, 30.0)
    points: int = 9
    refine_iters: int = 40
    phi0: float = 0.05
    horizon: float = 5.0
    stability_margin: float = 0.5

    def __post_init__(self):
        if self.points < 2:
            raise ConfigError("must be >= 2", field="points")
        if self.refine_iters < 0:
            raise ConfigError("must be >= 0", field="refine_iters")
        if _finite(self.phi0, "phi0") == 0:
            raise ConfigError("must be non-zero", field="phi0")
        if _finite(self.horizon, "horizon") <= 0:
            raise ConfigError("must be > 0", field="horizon")
        if _finite(self.stability_margin, "stability_margin") < 0:
            raise ConfigError("must be >= 0", field="stability_margin")


@dataclass(frozen=True)
class TuningResult:
    gains: PidGains
    cost: float
    poles: List[complex]

    @property
    def max_real(self) -> float:
        return max(p.real for p in self.poles)


def _integral_coupling(model: StateSpaceModel) -> Tuple[float, float, float]:
    """
    Coefficients of  integral(phi) = (b1 * phi_dot - b3 * x_dot) / kappa

    Follows from integrating b1 * phidd - b3 * xdd once from rest; valid
    because the friction terms cancel in that combination.
    """
    A, B = model.A, model.B
    b1, b3 = float(B[1]), float(B[3])
    drift = b1 * A[3, 1] - b3 * A[1, 1]
    kappa = b1 * A[3, 2] - b3 * A[1, 2]
    if abs(drift) > 1e-9 * max(1.0, abs(b1 * A[3, 1])):
        raise ConfigError("model does not have the cart-pendulum structure")
    if kappa == 0.0:
        raise ConfigError("pendulum channel is not controllable")
    return b1, b3, kappa


def closed_loop_matrix(model: StateSpaceModel, gains: PidGains, cfg: ControllerConfig) -> np.ndarray:
    """
    Continuous-equivalent closed loop of the linear plant and the controller

    States: x_dot, phi, phi_dot, then the derivative filter (when
    derivative_filter > 0), the actuator low-pass (when lowpass_tau > 0) and a
    (1,1) Pade stage (1 - s Tc/2)/(1 + s Tc/2) standing in for a one-period
    delay e^(-s Tc). The cart position does not feed back and is left out.
    """
    b1, b3, kappa = _integral_coupling(model)
    A, B = model.A, model.B
    tf, tau, h = cfg.derivative_filter, cfg.lowpass_tau, cfg.period / 2.0

    names = ["v", "phi", "w"]
    if tf > 0:
        names.append("z")
    if tau > 0:
        names.append("y")
    names.append("d")
    n = len(names)
    idx = {name: i for i, name in enumerate(names)}

    def unit(name: str) -> np.ndarray:
        e = np.zeros(n)
        e[idx[name]] = 1.0
        return e

    err = -unit("phi")
    integral_err = -(b1 * unit("w") - b3 * unit("v")) / kappa
    if tf > 0:
        d_term = (err - unit("z")) / tf
    else:
        d_term = -unit("w")
    u_pid = gains.kp * err + gains.ki * integral_err + gains.kd * d_term
    y = unit("y") if tau > 0 else u_pid
    u = 2.0 * unit("d") - y

    Acl = np.zeros((n, n))
    Acl[idx["v"]] = A[1, 1] * unit("v") + A[1, 2] * unit("phi") + B[1] * u
    Acl[idx["phi"]] = unit("w")
    Acl[idx["w"]] = A[3, 1] * unit("v") + A[3, 2] * unit("phi") + B[3] * u
    if tf > 0:
        Acl[idx["z"]] = (err - unit("z")) / tf
    if tau > 0:
        Acl[idx["y"]] = (u_pid - unit("y")) / tau
    Acl[idx["d"]] = (y - unit("d")) / h
    return Acl


def initial_loop_state(cfg: ControllerConfig, n: int, phi0: float) -> np.ndarray:
    """Loop state for a release from phi0 at rest, in closed_loop_matrix order"""
    z0 = np.zeros(n)
    z0[1] = phi0
    if cfg.derivative_filter > 0:
        z0[3] = -phi0       # filter starts on the error, no derivative kick
    return z0


def closed_loop_system(model: StateSpaceModel, gains: PidGains,
                       cfg: ControllerConfig) -> ctrl.StateSpace:
    """Autonomous closed loop with phi as its single output"""
    Acl = closed_loop_matrix(model, gains, cfg)
    n = Acl.shape[0]
    C = np.zeros((1, n))
    C[0, 1] = 1.0
    return ctrl.ss(Acl, np.zeros((n, 1)), C, np.zeros((1, 1)))


def closed_loop_poles(model: StateSpaceModel, gains: PidGains,
                      cfg: Optional[ControllerConfig] = None) -> List[complex]:
    sys = closed_loop_system(model, gains, cfg or ControllerConfig())
    return [complex(v) for v in ctrl.poles(sys)]


def _finite_horizon_ise(Acl: np.ndarray, z0: np.ndarray, horizon: float) -> float:
    n = Acl.shape[0]
    Q = np.zeros((n, n))
    Q[1, 1] = 1.0
    # W = int_0^T e^(A't) Q e^(At) dt = P - e^(A'T) P e^(AT),  A'P + PA = -Q
    try:
        P = solve_continuous_lyapunov(Acl.T, -Q)
    except (np.linalg.LinAlgError, ValueError) as e:
        logger.debug("Lyapunov solve failed: %s", e)
        return math.nan
    E = expm(Acl * horizon)
    W = P - E.T @ P @ E
    return float(z0 @ W @ z0)


def ise_cost(model: StateSpaceModel, gains: PidGains, cfg: ControllerConfig,
             phi0: float = 0.05, horizon: float = 5.0) -> float:
    """
    Integral of phi^2 over [0, horizon] for the linear closed loop

    Exact for any loop whose eigenvalues have no pair summing to zero, which
    holds for every loop the tuner accepts. Returns NaN when the Lyapunov
    equation cannot be solved.
    """
    Acl = closed_loop_matrix(model, gains, cfg)
    return _finite_horizon_ise(Acl, initial_loop_state(cfg, Acl.shape[0], phi0), horizon)


def _evaluate(model: StateSpaceModel, gains: PidGains, cfg: ControllerConfig,
              search: TuningConfig) -> Tuple[Optional[float], List[complex]]:
    """(cost, poles); cost is None when the loop misses the margin, NaN when it cannot be costed"""
    sys = closed_loop_system(model, gains, cfg)
    lams = ctrl.poles(sys)
    poles_ = [complex(v) for v in lams]
    if not np.all(np.isfinite(lams)) or lams.real.max() >= -search.stability_margin:
        return None, poles_
    cost = _finite_horizon_ise(sys.A, initial_loop_state(cfg, sys.nstates, search.phi0),
                               search.horizon)
    if not math.isfinite(cost) or cost < 0:
        logger.debug("no usable ISE at %s: %r", gains.as_tuple(), cost)
        return math.nan, poles_
    return cost, poles_


def tune(model: StateSpaceModel, search: Optional[TuningConfig] = None,
         cfg: Optional[ControllerConfig] = None, verbose: bool = False) -> TuningResult:
    """
    Grid search followed by coordinate descent on the ISE cost

    Args:
        model: linearization about upright (linmodel.linearize)
        search: ranges, resolution and constraint
        cfg: controller filters and period used in the closed loop

    Raises:
        TuningFailedError: no grid point meets the stability constraint, or
            none of those that do has a finite cost
    """
    search = search or TuningConfig()
    cfg = cfg or ControllerConfig()
    ranges = (search.kp, search.ki, search.kd)
    axes = [np.linspace(r.lo, r.hi, search.points) for r in ranges]

    best: Optional[Tuple[float, Tuple[float, float, float], List[complex]]] = None
    stable = feasible = 0
    for point in itertools.product(*axes):
        gains = PidGains(*(float(v) for v in point))
        cost, lams = _evaluate(model, gains, cfg, search)
        if cost is None:
            continue
        stable += 1
        if math.isnan(cost):
            continue
        feasible += 1
        if best is None or cost < best[0]:
            best = (cost, gains.as_tuple(), lams)

    total = search.points ** 3
    if stable == 0:
        raise TuningFailedError(
            f"none of {total} grid points puts all closed-loop poles left of "
            f"-{search.stability_margin}")
    if best is None:
        raise TuningFailedError(
            f"{stable} of {total} grid points meet the stability margin but none has a "
            f"finite ISE over {search.horizon} s")
    if verbose:
        print(f"🔍 Grid: {feasible}/{total} feasible, best cost {best[0]:.6g} at {best[1]}")
    logger.info("grid search: %d/%d feasible, cost %.6g at %s", feasible, total, best[0], best[1])

    steps = [(r.hi - r.lo) / (search.points - 1) for r in ranges]
    for it in range(search.refine_iters):
        improved = False
        for axis in range(3):
            for direction in (1.0, -1.0):
                trial = list(best[1])
                trial[axis] = min(ranges[axis].hi,
                                  max(ranges[axis].lo, trial[axis] + direction * steps[axis]))
                if tuple(trial) == best[1]:
                    continue
                cost, lams = _evaluate(model, PidGains(*trial), cfg, search)
                if cost is not None and cost < best[0]:
                    best = (cost, tuple(trial), lams)
                    improved = True
        if not improved:
            steps = [s / 2.0 for s in steps]
        logger.debug("refine %d: cost %.6g at %s", it, best[0], best[1])

    gains = PidGains(*best[1])
    if verbose:
        print(f"✅ Tuned gains kp={gains.kp:.4g} ki={gains.ki:.4g} kd={gains.kd:.4g} "
              f"(ISE {best[0]:.6g})")
    return TuningResult(gains=gains, cost=best[0], poles=best[2])


def tune_pid(model: StateSpaceModel, search: Optional[TuningConfig] = None,
             cfg: Optional[ControllerConfig] = None) -> PidGains:
    return tune(model, search, cfg).gains


# ---------------------------------------------------------------------------
# Reference closed loop
# ---------------------------------------------------------------------------

def check_period(cfg: ControllerConfig, scenario: Scenario) -> None:
    if abs(cfg.period - scenario.period) > 1e-12:
        raise ConfigError(
            f"controller period {cfg.period} differs from scenario period {scenario.period}",
            field="period")


def closed_loop_sim(params: PlantParams, cfg: ControllerConfig, scenario: Scenario) -> Trajectory:
    """
    In-process lockstep loop without frames

    Per control tick: sample theta, run the controller once, hold its force
    over period/dt physics steps. A fall ends the run with status fell; it is
    not raised.
    """
    check_period(cfg, scenario)
    runner = PlantRunner(params, scenario)
    controller = Controller(cfg)
    for k in runner.ticks():
        try:
            u_cmd, u_applied = controller.update(runner.measure().theta)
        except ControllerFault as e:
            logger.error("controller fault at tick %d: %s", k, e)
            runner.finish(Status.ABORTED)
            break
        if runner.advance(u_cmd, u_applied, seq=k):
            break
    runner.finish(Status.COMPLETED)
    return runner.trajectory()
