"""
Error types shared by the toolkit
Every failure the package raises derives from CartPoleError
"""

from typing import Optional


class CartPoleError(Exception):
    """Base class for all toolkit errors"""


class InputDomainError(CartPoleError, ValueError):
    """A numeric input was non-finite or outside the operation's domain"""


class ConfigError(CartPoleError, ValueError):
    """
    Invalid parameter or configuration value

    `field` is the dotted path of the offending key (e.g. "plant.M") when known.
    """
    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        self.detail = message
        super().__init__(f"{field}: {message}" if field else message)

    def under(self, section: str) -> "ConfigError":
        """Same error, re-rooted below a config section"""
        path = f"{section}.{self.field}" if self.field else section
        return ConfigError(self.detail, field=path)


class DivergedError(CartPoleError):
    """The integrated state left the finite / bounded region"""
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class ControllerFault(CartPoleError):
    """The controller received a measurement it cannot act on"""


class TuningFailedError(CartPoleError):
    """No stabilizing gains exist in the configured search space"""


class CsvFormatError(CartPoleError, ValueError):
    """Malformed trajectory file"""
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


# Wire protocol
class FrameError(CartPoleError):
    """A byte string is not a valid frame"""


class MagicMismatch(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class UnknownKind(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


# Transport
class TransportError(CartPoleError):
    """Socket level failure of an endpoint or relay"""


class BindError(TransportError):
    pass


class SessionAbort(TransportError):
    """The peer missed too many consecutive replies"""
    def __init__(self, misses: int):
        self.misses = misses
        super().__init__(f"session aborted after {misses} consecutive missed replies")
