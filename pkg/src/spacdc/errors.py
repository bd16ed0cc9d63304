"""Exception hierarchy shared by every module.

Plain ``ValueError`` is used for ordinary bad arguments (shape mismatches,
out-of-range scalars).  The classes below cover the failure modes callers
are expected to tell apart.
"""


class SpacdcError(Exception):
    pass


class InvalidConfig(SpacdcError, ValueError):
    """Code parameters or a config file that cannot be honoured."""


class QuantizationRangeError(SpacdcError, OverflowError):
    pass


class ProtocolError(SpacdcError):
    """Degenerate key material or a malformed message on the wire."""


class InsufficientData(SpacdcError, ValueError):
    pass


class JobFailed(SpacdcError):
    pass
