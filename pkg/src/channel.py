"""
Channel Impairment - Seeded Delay, Jitter and Loss
Implements: the DelayLine scheduler shared by the virtual-time in-process
binding and the UDP relay, and the relay itself.
"""

import heapq
import itertools
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, List, Optional, Tuple

import numpy as np

from .errors import BindError, ConfigError, FrameError
from .frames import FrameKind, decode_frame

if TYPE_CHECKING:
    from .bridge import WireConfig

logger = logging.getLogger(__name__)

# RNG stream per direction, so each direction draws the same sequence
# whatever the traffic in the other one
UPLINK = 0      # plant -> controller
DOWNLINK = 1    # controller -> plant


@dataclass(frozen=True)
class ChannelConfig:
    """One-way delay (ms), uniform jitter (ms), Bernoulli drop probability, RNG seed"""
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    drop: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("delay_ms", "jitter_ms", "drop"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError("must be a finite number", field=name)
        if self.delay_ms < 0:
            raise ConfigError("must be >= 0", field="delay_ms")
        if self.jitter_ms < 0:
            raise ConfigError("must be >= 0", field="jitter_ms")
        if not (0.0 <= self.drop < 1.0):
            raise ConfigError("must be in [0, 1)", field="drop")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("must be a non-negative integer", field="seed")

    @property
    def is_perfect(self) -> bool:
        return self.delay_ms == 0 and self.jitter_ms == 0 and self.drop == 0


class DelayLine:
    """
    Priority queue of in-flight packets

    push() decides loss first and then the added delay; pop_ready() releases
    everything due by `now` in due-time order (FIFO among equal times). Time is
    whatever clock the caller uses, in seconds.
    """

    def __init__(self, cfg: ChannelConfig, stream: int = UPLINK):
        self.cfg = cfg
        self._rng = np.random.default_rng([cfg.seed, stream])
        self._heap: List[Tuple[float, int, Any]] = []
        self._order = itertools.count()
        self.pushed = 0
        self.dropped = 0
        self.added_ms: List[float] = []

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, item: Any, now: float, lossless: bool = False) -> bool:
        """Schedule item; returns False when the channel dropped it"""
        self.pushed += 1
        if not lossless and self.cfg.drop > 0 and self._rng.random() < self.cfg.drop:
            self.dropped += 1
            return False
        added = self.cfg.delay_ms
        if self.cfg.jitter_ms > 0:
            added += self._rng.uniform(0.0, self.cfg.jitter_ms)
        self.added_ms.append(added)
        heapq.heappush(self._heap, (now + added / 1000.0, next(self._order), item))
        return True

    def next_due(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    def pop_ready(self, now: float) -> List[Tuple[float, Any]]:
        ready = []
        while self._heap and self._heap[0][0] <= now:
            due, _, item = heapq.heappop(self._heap)
            ready.append((due, item))
        return ready


@dataclass
class RelayStats:
    forwarded: int = 0
    dropped: int = 0
    added_ms: List[float] = field(default_factory=list)       # scheduled per packet
    measured_ms: List[float] = field(default_factory=list)    # receive-to-send per packet

    @property
    def mean_added_delay_ms(self) -> float:
        return float(np.mean(self.added_ms)) if self.added_ms else 0.0

    def to_dict(self) -> dict:
        return {
            "forwarded": self.forwarded,
            "dropped": self.dropped,
            "mean_added_delay_ms": self.mean_added_delay_ms,
            "mean_measured_delay_ms": float(np.mean(self.measured_ms)) if self.measured_ms else 0.0,
        }


def _resolve(addr: Optional[Tuple[str, int]]) -> Optional[Tuple[str, int]]:
    if addr is None:
        return None
    return (socket.gethostbyname(addr[0]), addr[1])


def _is_shutdown(data: bytes) -> bool:
    try:
        return decode_frame(data).kind is FrameKind.SHUTDOWN
    except FrameError:
        return False


class ChannelRelay:
    """
    Bidirectional UDP forwarder on one socket

    Packets from peer B (the controller) go to peer A (the plant); any other
    sender is treated as A, which is learned from the first packet when not
    configured. Shutdown frames are delayed but never dropped, and the relay
    exits once one has been delivered.
    """

    def __init__(self, cfg: ChannelConfig, wire: "WireConfig"):
        if wire.peer_b is None:
            raise ConfigError("relay needs the controller address", field="peer_b")
        self.cfg = cfg
        self.wire = wire
        self.peer_a = _resolve(wire.peer)
        self.peer_b = _resolve(wire.peer_b)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind(wire.listen)
        except OSError as e:
            self.sock.close()
            raise BindError(f"cannot bind relay to {wire.listen}: {e}") from e
        self.address = self.sock.getsockname()
        self.lines = {UPLINK: DelayLine(cfg, UPLINK), DOWNLINK: DelayLine(cfg, DOWNLINK)}
        self.stats = RelayStats()

    def close(self) -> None:
        self.sock.close()

    def _flush(self, now: float) -> bool:
        done = False
        for stream, line in self.lines.items():
            for _, (data, received, dest) in line.pop_ready(now):
                self.sock.sendto(data, dest)
                self.stats.forwarded += 1
                self.stats.measured_ms.append((time.monotonic() - received) * 1000.0)
                done = done or _is_shutdown(data)
        return done

    def run(self, stop: Optional[threading.Event] = None) -> RelayStats:
        idle_deadline = time.monotonic() + self.wire.idle_timeout_s
        logger.info("relay on %s: A=%s B=%s %s", self.address, self.peer_a, self.peer_b, self.cfg)
        try:
            while stop is None or not stop.is_set():
                now = time.monotonic()
                if self._flush(now):
                    logger.info("relay delivered shutdown, exiting")
                    break
                if now > idle_deadline:
                    logger.warning("relay idle for %.1f s, exiting", self.wire.idle_timeout_s)
                    break
                wait = 0.05
                for line in self.lines.values():
                    due = line.next_due()
                    if due is not None:
                        wait = min(wait, max(due - now, 0.0))
                self.sock.settimeout(max(wait, 1e-4))
                try:
                    data, addr = self.sock.recvfrom(2048)
                except socket.timeout:
                    continue
                received = time.monotonic()
                idle_deadline = received + self.wire.idle_timeout_s
                if addr == self.peer_b:
                    if self.peer_a is None:
                        logger.warning("packet from controller before plant is known, dropped")
                        continue
                    stream, dest = DOWNLINK, self.peer_a
                else:
                    if self.peer_a is None:
                        self.peer_a = addr
                    stream, dest = UPLINK, self.peer_b
                if not self.lines[stream].push((data, received, dest), received,
                                               lossless=_is_shutdown(data)):
                    self.stats.dropped += 1
                    logger.debug("dropped %d bytes from %s", len(data), addr)
        finally:
            self.stats.added_ms = self.lines[UPLINK].added_ms + self.lines[DOWNLINK].added_ms
        return self.stats


def channel_relay(cfg: ChannelConfig, wire: "WireConfig",
                  stop: Optional[threading.Event] = None) -> RelayStats:
    """Bind, forward until shutdown / idle timeout / stop, and report statistics"""
    relay = ChannelRelay(cfg, wire)
    try:
        return relay.run(stop)
    finally:
        relay.close()
