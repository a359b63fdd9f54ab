"""Exception hierarchy shared by every layer of the package."""


class CkksFedError(Exception):
    """Base class for all package errors."""


class DomainError(CkksFedError):
    """Polynomial is in the wrong (coefficient vs. NTT) representation."""


class IncompatibleParamsError(CkksFedError):
    """Operands were built over different rings or modulus chains."""


class SecurityError(CkksFedError):
    """Modulus chain exceeds the 128-bit security bound for the ring degree."""


class LevelExhaustedError(CkksFedError):
    """No modulus left to drop."""


class LevelMismatchError(CkksFedError):
    pass


class ScaleMismatchError(CkksFedError):
    pass


class CapacityError(CkksFedError):
    """More values than available plaintext slots."""


class EmptyModelError(CkksFedError):
    pass


class LayoutMismatchError(CkksFedError):
    pass


class DivergenceError(CkksFedError):
    """Local training produced a non-finite loss."""


class RoundAbortedError(CkksFedError):
    """A synchronous federation round could not complete."""


class ConfigError(CkksFedError):
    pass


class WireError(CkksFedError):
    """Malformed, truncated or corrupted wire data."""


class BadMagicError(WireError):
    pass


class ChecksumError(WireError):
    pass


class OversizeError(WireError):
    pass


class TruncatedError(WireError):
    pass


class UnknownMessageError(WireError):
    pass


class ParamsMismatchError(WireError, IncompatibleParamsError):
    """Serialized object was produced under different ring parameters."""


class ConnectionClosedError(WireError):
    pass
