"""
Wire Frames - Binary Codec for the Lockstep Protocol

Layout (little-endian):
    magic "CPSB" | version u8 | kind u8 | seq u32 | sim_time f64 | payload f64 * n

Sensor and Reset carry (x, x_dot, theta, theta_dot), Actuator carries the
force and Shutdown carries nothing.
"""

import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple

from .errors import LengthMismatch, MagicMismatch, UnknownKind, UnsupportedVersion
from .plant import PlantState

MAGIC = b"CPSB"
VERSION = 1
SEQ_MAX = 0xFFFFFFFF

_HEADER = struct.Struct("<4sBBId")
HEADER_SIZE = _HEADER.size  # 18


class FrameKind(IntEnum):
    SENSOR = 1
    ACTUATOR = 2
    RESET = 3
    SHUTDOWN = 4


PAYLOAD_LEN = {
    FrameKind.SENSOR: 4,
    FrameKind.ACTUATOR: 1,
    FrameKind.RESET: 4,
    FrameKind.SHUTDOWN: 0,
}


def frame_size(kind: FrameKind) -> int:
    return HEADER_SIZE + 8 * PAYLOAD_LEN[kind]


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    seq: int
    sim_time: float
    payload: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", FrameKind(self.kind))
        object.__setattr__(self, "payload", tuple(float(v) for v in self.payload))
        if not (0 <= self.seq <= SEQ_MAX):
            raise ValueError(f"seq {self.seq} does not fit in u32")
        if len(self.payload) != PAYLOAD_LEN[self.kind]:
            raise ValueError(f"{self.kind.name} carries {PAYLOAD_LEN[self.kind]} values, "
                             f"got {len(self.payload)}")

    @classmethod
    def sensor(cls, seq: int, sim_time: float, state: PlantState) -> "Frame":
        return cls(FrameKind.SENSOR, seq, sim_time, state.as_tuple())

    @classmethod
    def actuator(cls, seq: int, sim_time: float, force: float) -> "Frame":
        return cls(FrameKind.ACTUATOR, seq, sim_time, (force,))

    @classmethod
    def reset(cls, seq: int, sim_time: float, state: PlantState) -> "Frame":
        return cls(FrameKind.RESET, seq, sim_time, state.as_tuple())

    @classmethod
    def shutdown(cls, seq: int, sim_time: float) -> "Frame":
        return cls(FrameKind.SHUTDOWN, seq, sim_time)

    @property
    def state(self) -> PlantState:
        if self.kind not in (FrameKind.SENSOR, FrameKind.RESET):
            raise ValueError(f"{self.kind.name} frame has no state")
        return PlantState(*self.payload)

    @property
    def force(self) -> float:
        if self.kind is not FrameKind.ACTUATOR:
            raise ValueError(f"{self.kind.name} frame has no force")
        return self.payload[0]

    def same_as(self, other: "Frame") -> bool:
        """Equality that treats NaN payload values as equal to themselves"""
        if (self.kind, self.seq) != (other.kind, other.seq):
            return False
        pairs = zip((self.sim_time,) + self.payload, (other.sim_time,) + other.payload)
        return all(a == b or (math.isnan(a) and math.isnan(b)) for a, b in pairs)


def encode_frame(frame: Frame) -> bytes:
    n = len(frame.payload)
    return (_HEADER.pack(MAGIC, VERSION, int(frame.kind), frame.seq, frame.sim_time)
            + struct.pack(f"<{n}d", *frame.payload))


def decode_frame(data: bytes) -> Frame:
    """
    Parse one frame

    Checks run in order: magic, version, kind, exact length.

    Raises:
        MagicMismatch, UnsupportedVersion, UnknownKind, LengthMismatch
    """
    data = bytes(data)
    head = data[:4]
    if head != MAGIC[:len(head)]:
        raise MagicMismatch(f"bad magic {head.hex()}")
    if len(data) < 6:
        raise LengthMismatch(f"{len(data)} bytes is shorter than the frame prefix")
    if data[4] != VERSION:
        raise UnsupportedVersion(f"version {data[4]}, expected {VERSION}")
    try:
        kind = FrameKind(data[5])
    except ValueError:
        raise UnknownKind(f"kind {data[5]}") from None
    expected = frame_size(kind)
    if len(data) != expected:
        raise LengthMismatch(f"{kind.name} frame is {expected} bytes, got {len(data)}")
    _, _, _, seq, sim_time = _HEADER.unpack_from(data)
    payload = struct.unpack_from(f"<{PAYLOAD_LEN[kind]}d", data, HEADER_SIZE)
    return Frame(kind, seq, sim_time, payload)
