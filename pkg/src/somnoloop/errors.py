"""Typed error taxonomy shared across the package."""


class SomnoloopError(Exception):
    """Base class for every error raised by this package."""


# --- protocol / codec ---

class RangeError(SomnoloopError, ValueError):
    """A value cannot be represented by the codec or violates stated bounds."""


class FramingError(SomnoloopError):
    """Byte stream does not parse as a wire message (magic, length, kind)."""


class IntegrityError(SomnoloopError):
    """Wire message parsed but failed its CRC check."""


class VersionError(SomnoloopError):
    """Peer speaks an unknown protocol version."""


class ValidationError(SomnoloopError, ValueError):
    """A domain value violates its invariants; ``fields`` names the offenders."""

    def __init__(self, *fields: str):
        self.fields = list(fields)
        super().__init__("invalid field(s): " + ", ".join(fields))


# --- simulator / acquisition ---

class StartupError(SomnoloopError):
    """Server could not start (e.g. port bind failure)."""


class ConnectError(SomnoloopError):
    """Client could not establish a session."""


class StreamOrderError(SomnoloopError):
    """Sample indices arrived out of order on a live stream."""


class FinalizeError(SomnoloopError):
    """Session output files could not be written completely."""

    def __init__(self, message: str, written=None):
        self.written = list(written or [])
        super().__init__(message)


# --- analysis / scoring ---

class DataError(SomnoloopError):
    """Input signal contains non-finite or otherwise unusable samples."""


class ShapeError(SomnoloopError):
    """Array dimensions do not match the operation's contract."""


class TrainingError(SomnoloopError):
    """Training data is degenerate (e.g. a single class)."""


class ModelContractError(SomnoloopError):
    """Feature names or dimensions do not match the trained model."""


# --- stimulation ---

class StimulusError(SomnoloopError):
    """Stimulation command was rejected (NACK) or timed out."""


# --- sync / offline ---

class WindowError(SomnoloopError):
    """Requested analysis window exceeds the signal."""


class DegenerateSignalError(SomnoloopError):
    """Signal is constant over the analysis window; correlation undefined."""


class FilterError(SomnoloopError):
    """Filter band edges are not realizable at the given sampling rate."""


class WeakEventError(SomnoloopError):
    """No usable event energy found; manual alignment suggested."""


class LoadError(SomnoloopError):
    """A recording or sidecar file failed to parse."""


class ExportError(SomnoloopError):
    """Offline export could not be completed."""
