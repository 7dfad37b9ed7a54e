"""Exception hierarchy shared across the package."""


class PGNError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PGNError, ValueError):
    pass


class NotScalar(PGNError, ValueError):
    pass


class NotDivisible(PGNError, ValueError):
    pass


class TooManyPrompts(PGNError, ValueError):
    pass


class NoAttention(PGNError, RuntimeError):
    pass


class LayerOutOfRange(PGNError, IndexError):
    pass


class BadCheckpoint(PGNError, ValueError):
    pass


class RankDeficient(PGNError, ArithmeticError):
    pass


class UnknownKind(PGNError, ValueError):
    pass


class OutOfRange(PGNError, ValueError):
    pass


class MissingGrad(PGNError, RuntimeError):
    pass


class EmptyLoader(PGNError, ValueError):
    pass


class IndexOutOfRange(PGNError, IndexError):
    pass


class BadLength(PGNError, ValueError):
    pass


class BadLabel(PGNError, ValueError):
    pass


class TooFewPoints(PGNError, ValueError):
    pass


class LengthMismatch(PGNError, ValueError):
    pass


class NoPrompts(PGNError, ValueError):
    pass


class BadToken(PGNError, IndexError):
    pass


class Truncated(PGNError, ValueError):
    pass


class BadMagic(PGNError, ValueError):
    pass


class BadVersion(PGNError, ValueError):
    pass


class BadFrame(PGNError, ValueError):
    """Structurally invalid frame (flags, channel count, trailing bytes)."""


class BindFailure(PGNError, OSError):
    pass


class ServerStatus(PGNError, RuntimeError):
    """Raised by the client when the server answers with a non-zero status."""

    def __init__(self, status: int):
        super().__init__(f"server returned status {status}")
        self.status = status


class ConfigError(PGNError, ValueError):
    pass
