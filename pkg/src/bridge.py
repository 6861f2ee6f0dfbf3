"""
Co-Simulation Bridge - Lockstep Coupling of Plant and Controller
Implements: the in-process binding (direct calls, optional virtual-time
channel), the UDP plant and controller endpoints, and their frame logs.
"""

import logging
import math
import os
import socket
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from dotenv import load_dotenv

from .channel import DOWNLINK, UPLINK, ChannelConfig, DelayLine
from .control import Controller, ControllerConfig, check_period
from .errors import BindError, ConfigError, FrameError, SessionAbort
from .frames import Frame, FrameKind, decode_frame, encode_frame
from .plant import PlantParams
from .scenario import PlantRunner, Scenario, Status, Trajectory

load_dotenv()
logger = logging.getLogger(__name__)

Address = Tuple[str, int]

# virtual-time arrivals within this slack of a tick count as on time
_SLACK = 1e-9


class HoldPolicy(str, Enum):
    HOLD_LAST = "hold_last"
    ZERO = "zero"


def parse_address(text: str, field_name: str = "address") -> Address:
    """'host:port' -> (host, port)"""
    host, sep, port = str(text).rpartition(":")
    if not sep or not host:
        raise ConfigError(f"expected HOST:PORT, got {text!r}", field=field_name)
    try:
        number = int(port)
    except ValueError:
        raise ConfigError(f"port must be an integer, got {port!r}", field=field_name) from None
    if not (0 <= number <= 65535):
        raise ConfigError(f"port out of range: {number}", field=field_name)
    return host, number


def format_address(addr: Optional[Address]) -> Optional[str]:
    return None if addr is None else f"{addr[0]}:{addr[1]}"


def _env_address(name: str) -> Optional[Address]:
    value = os.getenv(name)
    return parse_address(value, name) if value else None


@dataclass(frozen=True)
class WireConfig:
    """
    Endpoint settings

    listen: local bind address. peer: where the plant sends sensor frames
    (and where the controller replies, when set). peer_b: the controller side
    of a relay. max_misses counts consecutive ticks without a reply.
    """
    listen: Address = ("127.0.0.1", 0)
    peer: Optional[Address] = None
    peer_b: Optional[Address] = None
    timeout_ms: float = 200.0
    max_misses: int = 10
    hold_policy: HoldPolicy = HoldPolicy.HOLD_LAST
    realtime: bool = False
    idle_timeout_s: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "hold_policy", HoldPolicy(self.hold_policy))
        for name in ("listen", "peer", "peer_b"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, (str(value[0]), int(value[1])))
        if not (isinstance(self.timeout_ms, (int, float)) and self.timeout_ms > 0):
            raise ConfigError("must be > 0", field="timeout_ms")
        if isinstance(self.max_misses, bool) or not isinstance(self.max_misses, int) \
                or self.max_misses < 1:
            raise ConfigError("must be an integer >= 1", field="max_misses")
        if not self.idle_timeout_s > 0:
            raise ConfigError("must be > 0", field="idle_timeout_s")

    @classmethod
    def from_env(cls, **overrides) -> "WireConfig":
        """Defaults from CARTPOLE_* variables (a .env file is honoured), then overrides"""
        env = {}
        listen = _env_address("CARTPOLE_LISTEN")
        if listen:
            env["listen"] = listen
        peer = _env_address("CARTPOLE_PEER")
        if peer:
            env["peer"] = peer
        for key, var, conv in (("timeout_ms", "CARTPOLE_TIMEOUT_MS", float),
                               ("max_misses", "CARTPOLE_MAX_MISSES", int),
                               ("hold_policy", "CARTPOLE_HOLD_POLICY", str)):
            raw = os.getenv(var)
            if raw:
                try:
                    env[key] = conv(raw)
                except ValueError:
                    raise ConfigError(f"cannot parse {raw!r}", field=var) from None
        env.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**env)


@dataclass
class FrameEvent:
    direction: str      # "tx", "rx", "stale", "duplicate", "error"
    kind: Optional[FrameKind]
    seq: Optional[int]
    sim_time: Optional[float]
    note: str = ""

    def to_dict(self) -> Dict:
        return {
            "direction": self.direction,
            "kind": self.kind.name if self.kind is not None else None,
            "seq": self.seq,
            "sim_time": self.sim_time,
            "note": self.note,
        }


@dataclass
class FrameLog:
    """Ordered record of frames an endpoint sent, received or rejected"""
    events: List[FrameEvent] = field(default_factory=list)

    def record(self, direction: str, frame: Optional[Frame] = None, note: str = "") -> None:
        if frame is None:
            self.events.append(FrameEvent(direction, None, None, None, note))
        else:
            self.events.append(FrameEvent(direction, frame.kind, frame.seq, frame.sim_time, note))

    def seqs(self, kind: FrameKind, direction: str = "tx") -> List[int]:
        return [e.seq for e in self.events if e.kind is kind and e.direction == direction]

    def count(self, kind: Optional[FrameKind] = None, direction: Optional[str] = None) -> int:
        return sum(1 for e in self.events
                   if (kind is None or e.kind is kind)
                   and (direction is None or e.direction == direction))

    def summary(self) -> Dict:
        out: Dict[str, int] = {}
        for e in self.events:
            key = f"{e.direction}:{e.kind.name if e.kind is not None else '-'}"
            out[key] = out.get(key, 0) + 1
        return out


class ControllerHandler:
    """
    Transport-independent controller side of the protocol

    Each sensor seq is served exactly once: a seq at or below the last served
    one is dropped, so processed seqs are strictly increasing. Only a Reset
    frame starts a new session. With keep_commands the controller output of
    each reply is kept until the plant takes it (in-process binding only).
    """

    def __init__(self, cfg: ControllerConfig, log: Optional[FrameLog] = None,
                 keep_commands: bool = False):
        self.controller = Controller(cfg)
        self.log = log if log is not None else FrameLog()
        self.last_seq: Optional[int] = None
        self.keep_commands = keep_commands
        self.commands: Dict[int, float] = {}
        self.shutdown = False

    def _restart(self) -> None:
        self.controller.reset()
        self.last_seq = None
        self.commands.clear()

    def handle(self, frame: Frame) -> Optional[Frame]:
        if frame.kind is FrameKind.SENSOR:
            if self.last_seq is not None and frame.seq <= self.last_seq:
                logger.info("duplicate or stale sensor seq %d (last %d) dropped",
                            frame.seq, self.last_seq)
                self.log.record("duplicate", frame)
                return None
            self.log.record("rx", frame)
            u_cmd, u_applied = self.controller.update(frame.state.theta)
            self.last_seq = frame.seq
            if self.keep_commands:
                self.commands[frame.seq] = u_cmd
            reply = Frame.actuator(frame.seq, frame.sim_time, u_applied)
            self.log.record("tx", reply)
            return reply
        self.log.record("rx", frame)
        if frame.kind is FrameKind.RESET:
            logger.info("reset at t=%.6f", frame.sim_time)
            self._restart()
        elif frame.kind is FrameKind.SHUTDOWN:
            logger.info("shutdown received (seq %d)", frame.seq)
            self.shutdown = True
        else:
            logger.warning("unexpected %s frame seq %d ignored", frame.kind.name, frame.seq)
        return None

    def take_command(self, seq: int) -> float:
        """Controller output behind reply seq; older entries are discarded"""
        u_cmd = self.commands.pop(seq)
        for old in [s for s in self.commands if s < seq]:
            del self.commands[old]
        return u_cmd


class _Hold:
    """Force applied on ticks without a fresh actuator frame"""

    def __init__(self, policy: HoldPolicy):
        self.policy = policy
        self.u_cmd = 0.0
        self.u_applied = 0.0
        self.consecutive = 0

    def applied(self, u_cmd: float, u_applied: float) -> None:
        self.u_cmd, self.u_applied = u_cmd, u_applied
        self.consecutive = 0

    def missed(self) -> Tuple[float, float]:
        self.consecutive += 1
        if self.policy is HoldPolicy.ZERO:
            return 0.0, 0.0
        return self.u_cmd, self.u_applied


def inproc_loop(params: PlantParams, cfg: ControllerConfig, scenario: Scenario,
                channel: Optional[ChannelConfig] = None, wire: Optional[WireConfig] = None,
                frame_log: Optional[FrameLog] = None) -> Trajectory:
    """
    Direct-call lockstep binding

    Frames are passed as values. Without a channel (or with a perfect one)
    every sensor is answered within its own tick and the result equals
    control.closed_loop_sim bit for bit. With an impaired channel frames
    travel through seeded delay lines in simulated time: the controller answers
    a sensor when it arrives, and each tick the plant applies the newest
    actuator frame that has arrived and is newer than the last one applied.
    """
    check_period(cfg, scenario)
    wire = wire or WireConfig()
    channel = channel or ChannelConfig()
    log = frame_log if frame_log is not None else FrameLog()
    runner = PlantRunner(params, scenario)
    handler = ControllerHandler(cfg, log, keep_commands=True)
    uplink = DelayLine(channel, UPLINK)
    downlink = DelayLine(channel, DOWNLINK)
    hold = _Hold(wire.hold_policy)
    last_applied = -1
    seq = 0

    for k in runner.ticks():
        seq = k
        now = runner.time
        sensor = Frame.sensor(k, now, runner.measure())
        log.record("tx", sensor, note="plant")
        uplink.push(sensor, now)

        for arrived, frame in uplink.pop_ready(now + _SLACK):
            reply = handler.handle(frame)
            if reply is not None:
                downlink.push(reply, arrived)

        fresh: Optional[Frame] = None
        for _, frame in downlink.pop_ready(now + _SLACK):
            if frame.seq <= last_applied or (fresh is not None and frame.seq <= fresh.seq):
                log.record("stale", frame, note="plant")
                continue
            fresh = frame

        if fresh is not None:
            log.record("rx", fresh, note="plant")
            last_applied = fresh.seq
            u_cmd = handler.take_command(fresh.seq)
            hold.applied(u_cmd, fresh.force)
            if runner.advance(u_cmd, fresh.force, seq=k):
                break
            continue

        u_cmd, u_applied = hold.missed()
        logger.debug("tick %d: no actuator frame, holding %.6g N", k, u_applied)
        if runner.advance(u_cmd, u_applied, seq=k, miss=True):
            break
        if hold.consecutive >= wire.max_misses:
            logger.error("%s", SessionAbort(hold.consecutive))
            runner.finish(Status.ABORTED)
            break

    runner.finish(Status.COMPLETED)
    shutdown = Frame.shutdown(seq + 1, runner.time)
    log.record("tx", shutdown, note="plant")
    handler.handle(shutdown)
    return runner.trajectory()


# ---------------------------------------------------------------------------
# UDP endpoints
# ---------------------------------------------------------------------------

def _bind(addr: Address, role: str) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind(addr)
    except OSError as e:
        sock.close()
        raise BindError(f"{role} cannot bind {addr[0]}:{addr[1]}: {e}") from e
    return sock


class PlantEndpoint:
    """
    Plant side over UDP

    Per tick: send Sensor(seq=k) to wire.peer, wait up to timeout_ms for
    Actuator(seq=k), then integrate one control period. Older actuator seqs
    are stale and ignored. The actuator payload carries only the applied
    force, so u_cmd is recorded as NaN.
    """

    def __init__(self, params: PlantParams, wire: WireConfig, scenario: Scenario):
        if wire.peer is None:
            raise ConfigError("plant endpoint needs a peer address", field="peer")
        self.params = params
        self.wire = wire
        self.scenario = scenario
        self.sock = _bind(wire.listen, "plant")
        self.address: Address = self.sock.getsockname()
        self.log = FrameLog()
        self._peer_shutdown = False

    def close(self) -> None:
        self.sock.close()

    def _send(self, frame: Frame) -> None:
        self.sock.sendto(encode_frame(frame), self.wire.peer)
        self.log.record("tx", frame)

    def _await(self, runner: PlantRunner, k: int) -> Optional[Frame]:
        deadline = time.monotonic() + self.wire.timeout_ms / 1000.0
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            self.sock.settimeout(remaining)
            try:
                data, addr = self.sock.recvfrom(2048)
            except socket.timeout:
                return None
            try:
                frame = decode_frame(data)
            except FrameError as e:
                logger.warning("undecodable datagram from %s: %s", addr, e)
                self.log.record("error", note=f"{type(e).__name__}: {e}")
                continue
            if frame.kind is FrameKind.ACTUATOR:
                if frame.seq == k:
                    self.log.record("rx", frame)
                    return frame
                logger.info("actuator seq %d while waiting for %d ignored", frame.seq, k)
                self.log.record("stale", frame)
            elif frame.kind is FrameKind.RESET:
                self.log.record("rx", frame)
                runner.reset(frame.state)
            elif frame.kind is FrameKind.SHUTDOWN:
                self.log.record("rx", frame)
                logger.info("peer shut the session down")
                self._peer_shutdown = True
                return None
            else:
                logger.warning("unexpected %s frame from %s", frame.kind.name, addr)
                self.log.record("error", frame, note="unexpected kind")

    def run(self) -> Trajectory:
        sc = self.scenario
        runner = PlantRunner(self.params, sc)
        hold = _Hold(self.wire.hold_policy)
        start = time.monotonic()
        seq = 0
        logger.info("plant endpoint %s -> %s, %d ticks", self.address, self.wire.peer, sc.n_ticks)
        try:
            for k in runner.ticks():
                seq = k
                self._send(Frame.sensor(k, runner.time, runner.measure()))
                reply = self._await(runner, k)
                if self._peer_shutdown:
                    break
                if reply is not None:
                    hold.applied(math.nan, reply.force)
                    ended = runner.advance(math.nan, reply.force, seq=k)
                else:
                    u_cmd, u_applied = hold.missed()
                    logger.warning("tick %d: no reply in %.0f ms (%d consecutive)",
                                   k, self.wire.timeout_ms, hold.consecutive)
                    ended = runner.advance(u_cmd, u_applied, seq=k, miss=True)
                    if not ended and hold.consecutive >= self.wire.max_misses:
                        raise SessionAbort(hold.consecutive)
                if ended:
                    break
                if self.wire.realtime:
                    lag = start + (k + 1) * sc.period - time.monotonic()
                    if lag > 0:
                        time.sleep(lag)
            runner.finish(Status.COMPLETED)
        except SessionAbort as e:
            logger.error("%s", e)
            runner.finish(Status.ABORTED)
        finally:
            self._send(Frame.shutdown(seq + 1, runner.time))
        return runner.trajectory()


def run_plant_endpoint(params: PlantParams, wire: WireConfig, scenario: Scenario) -> Trajectory:
    endpoint = PlantEndpoint(params, wire, scenario)
    try:
        return endpoint.run()
    finally:
        endpoint.close()


class ControllerEndpoint:
    """
    Controller side over UDP

    Answers each Sensor with an Actuator of the same seq, sent to wire.peer
    when configured and to the sender otherwise. Ends on Shutdown or after
    idle_timeout_s without traffic.
    """

    def __init__(self, cfg: ControllerConfig, wire: WireConfig):
        self.cfg = cfg
        self.wire = wire
        self.sock = _bind(wire.listen, "controller")
        self.address: Address = self.sock.getsockname()
        self.log = FrameLog()

    def close(self) -> None:
        self.sock.close()

    def run(self) -> FrameLog:
        handler = ControllerHandler(self.cfg, self.log)
        self.sock.settimeout(self.wire.idle_timeout_s)
        logger.info("controller endpoint listening on %s", self.address)
        while not handler.shutdown:
            try:
                data, addr = self.sock.recvfrom(2048)
            except socket.timeout:
                logger.warning("no traffic for %.1f s, controller exiting", self.wire.idle_timeout_s)
                break
            try:
                frame = decode_frame(data)
            except FrameError as e:
                logger.warning("undecodable datagram from %s: %s", addr, e)
                self.log.record("error", note=f"{type(e).__name__}: {e}")
                continue
            reply = handler.handle(frame)
            if reply is not None:
                self.sock.sendto(encode_frame(reply), self.wire.peer or addr)
        logger.info("controller session ended: %s", self.log.summary())
        return self.log


def run_controller_endpoint(cfg: ControllerConfig, wire: WireConfig) -> FrameLog:
    endpoint = ControllerEndpoint(cfg, wire)
    try:
        return endpoint.run()
    finally:
        endpoint.close()
