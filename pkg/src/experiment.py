"""
Experiment Orchestration
Runs a configured episode over the selected transport, computes metrics,
persists the trajectory, tunes gains and sweeps channel latency.
"""

import logging
import multiprocessing
import queue
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .bridge import ControllerEndpoint, WireConfig, inproc_loop, run_plant_endpoint
from .channel import ChannelConfig, ChannelRelay
from .config import ExperimentConfig
from .control import PidGains, TuningResult, tune
from .errors import CartPoleError, TransportError
from .linmodel import linearize
from .metrics import DEFAULT_TOLERANCE, Metrics, compute_metrics
from .scenario import Status, Trajectory, write_csv

logger = logging.getLogger(__name__)

DEFAULT_DELAYS_MS = (0.0, 10.0, 20.0, 50.0, 100.0, 200.0)
LOOPBACK = ("127.0.0.1", 0)
_STARTUP_TIMEOUT_S = 10.0


def tune_from_config(config: ExperimentConfig, verbose: bool = False) -> TuningResult:
    """Tune against the linearization of the configured plant and controller filters"""
    return tune(linearize(config.plant), config.tuning, config.controller, verbose=verbose)


# ---------------------------------------------------------------------------
# UDP transport: child processes over loopback
# ---------------------------------------------------------------------------

def _controller_child(config: ExperimentConfig, wire: WireConfig, ready) -> None:
    try:
        endpoint = ControllerEndpoint(config.controller, wire)
    except CartPoleError as e:
        ready.put(("error", str(e)))
        return
    ready.put(("ok", endpoint.address))
    try:
        endpoint.run()
    finally:
        endpoint.close()


def _relay_child(channel: ChannelConfig, wire: WireConfig, ready) -> None:
    try:
        relay = ChannelRelay(channel, wire)
    except CartPoleError as e:
        ready.put(("error", str(e)))
        return
    ready.put(("ok", relay.address))
    try:
        stats = relay.run()
        logger.info("relay finished: %s", stats.to_dict())
    finally:
        relay.close()


def _start(target, args, name: str):
    ready = multiprocessing.Queue()
    proc = multiprocessing.Process(target=target, args=args + (ready,), name=name, daemon=True)
    proc.start()
    try:
        status, value = ready.get(timeout=_STARTUP_TIMEOUT_S)
    except queue.Empty:
        proc.terminate()
        raise TransportError(f"{name} did not start within {_STARTUP_TIMEOUT_S} s") from None
    if status != "ok":
        proc.join()
        raise TransportError(f"{name} failed to start: {value}")
    return proc, tuple(value)


def run_udp(config: ExperimentConfig) -> Trajectory:
    """
    Plant in this process, controller (and a relay when the channel is
    impaired) as child processes, all on 127.0.0.1 with ephemeral ports
    """
    wire = config.wire
    children = []
    try:
        ctrl_wire = replace(wire, listen=LOOPBACK, peer=None, peer_b=None)
        proc, ctrl_addr = _start(_controller_child, (config, ctrl_wire), "controller")
        children.append(proc)
        target = ctrl_addr
        if not config.channel.is_perfect:
            relay_wire = replace(wire, listen=LOOPBACK, peer=None, peer_b=ctrl_addr)
            proc, target = _start(_relay_child, (config.channel, relay_wire), "relay")
            children.append(proc)
        plant_wire = replace(wire, listen=LOOPBACK, peer=target, peer_b=None)
        return run_plant_endpoint(config.plant, plant_wire, config.scenario)
    finally:
        for proc in children:
            proc.join(timeout=wire.idle_timeout_s)
            if proc.is_alive():
                logger.warning("%s still running, terminating", proc.name)
                proc.terminate()


def run_experiment(config: ExperimentConfig, gains: Optional[PidGains] = None,
                   csv_path: Optional[Union[str, Path]] = None, verbose: bool = False,
                   tolerance: float = DEFAULT_TOLERANCE) -> Tuple[Trajectory, Metrics]:
    """
    Execute one episode and score it

    Args:
        gains: replaces the gains of config.controller when given
        csv_path: trajectory file to write

    Returns:
        (trajectory, metrics); a fall is a status, not an exception
    """
    if gains is not None:
        config = config.with_gains(gains)
    if verbose:
        print(f"🚀 Running {config.scenario.duration:g} s episode over {config.transport} "
              f"(kp={config.controller.gains.kp:g} ki={config.controller.gains.ki:g} "
              f"kd={config.controller.gains.kd:g})")

    if config.transport == "udp":
        traj = run_udp(config)
    else:
        traj = inproc_loop(config.plant, config.controller, config.scenario,
                           channel=config.channel, wire=config.wire)

    result = compute_metrics(traj, tolerance, phi0=config.scenario.initial.phi)
    if csv_path is not None:
        write_csv(traj, csv_path)
        logger.info("trajectory written to %s (%d rows)", csv_path, len(traj))
    if verbose:
        print(f"📊 Status: {result.status.value}, settling {result.settling_time}, "
              f"peak |phi| {result.peak_phi:.4g} rad, misses {result.miss_count}")
    return traj, result


# ---------------------------------------------------------------------------
# Latency sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    delay_ms: float
    metrics: Metrics

    @property
    def stable(self) -> bool:
        return self.metrics.status is Status.COMPLETED

    def to_dict(self) -> Dict:
        d = {"delay_ms": self.delay_ms, "stable": self.stable}
        d.update(self.metrics.to_dict())
        return d


@dataclass
class SweepResult:
    points: List[SweepPoint] = field(default_factory=list)

    @property
    def stable_up_to(self) -> Optional[float]:
        """Largest delay such that every delay up to it stayed up"""
        last = None
        for p in sorted(self.points, key=lambda p: p.delay_ms):
            if not p.stable:
                break
            last = p.delay_ms
        return last

    @property
    def first_fall(self) -> Optional[float]:
        for p in sorted(self.points, key=lambda p: p.delay_ms):
            if p.metrics.fell:
                return p.delay_ms
        return None

    def to_dict(self) -> Dict:
        return {
            "points": [p.to_dict() for p in self.points],
            "stable_up_to_ms": self.stable_up_to,
            "first_fall_ms": self.first_fall,
        }


def latency_sweep(config: ExperimentConfig, gains: Optional[PidGains] = None,
                  delays_ms: Sequence[float] = DEFAULT_DELAYS_MS,
                  verbose: bool = False) -> SweepResult:
    """
    Repeat the in-process episode with a fixed one-way delay on both links

    Runs in simulated time. Ticks spent waiting for the first reply are misses
    under the hold policy; the miss limit is lifted so a long delay ends in a
    fall rather than an abort.
    """
    if gains is not None:
        config = config.with_gains(gains)
    wire = replace(config.wire, max_misses=config.scenario.n_ticks + 1)
    result = SweepResult()
    for delay in delays_ms:
        channel = replace(config.channel, delay_ms=float(delay))
        traj = inproc_loop(config.plant, config.controller, config.scenario,
                           channel=channel, wire=wire)
        point = SweepPoint(float(delay), compute_metrics(traj, phi0=config.scenario.initial.phi))
        result.points.append(point)
        logger.info("delay %g ms: %s", delay, point.metrics.status.value)
        if verbose:
            mark = "✅" if point.stable else "❌"
            print(f"{mark} {delay:g} ms one-way: {point.metrics.status.value}")
    return result
