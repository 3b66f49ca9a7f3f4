"""Exception classes shared across the package.

The CLI maps UsageError to exit code 1 and CorruptStreamError to exit
code 2; everything else is a bug.
"""


class BnvcError(Exception):
    """Base class for all package errors."""


class UsageError(BnvcError, ValueError):
    """Caller violated a documented precondition (bad shapes, bad flags,
    mismatched model/stream configuration)."""


class ShapeError(UsageError):
    """Tensor shape mismatch with a descriptive message."""


class CorruptStreamError(BnvcError, RuntimeError):
    """Bitstream or payload failed an integrity or framing check."""
