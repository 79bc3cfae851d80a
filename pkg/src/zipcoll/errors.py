"""Exception hierarchy shared by the codec, container, transport and collectives."""


class ZipcollError(Exception):
    """Base class for all library errors."""


class DegenerateDataError(ZipcollError, ValueError):
    """Raised when a statistic cannot be computed (empty input, no finite values)."""


class UnrepresentableError(ZipcollError, ValueError):
    """Raised when a value does not fit the fixed-width wire encoding."""


class CorruptChunkError(ZipcollError):
    """A compressed chunk violates its structural invariants.

    The message names the first offending field.
    """


class CorruptFrameError(ZipcollError):
    """A serialized frame is malformed (bad magic, truncation, offset abuse...)."""


class TransportError(ZipcollError):
    """Point-to-point messaging failure (peer unreachable, connection reset)."""


class TransportTimeout(TransportError):
    """A blocking receive exceeded its timeout."""


class ProtocolError(ZipcollError):
    """Ranks disagree about counts or phase structure of a collective."""


class CollectiveError(ZipcollError):
    """A collective failed; carries the peer rank that caused it when known."""

    def __init__(self, message: str, peer: int | None = None):
        super().__init__(message if peer is None else f"{message} (peer rank {peer})")
        self.peer = peer


class ProfilingError(ZipcollError):
    """The cost-model profiling run could not complete or produced a degenerate fit."""
