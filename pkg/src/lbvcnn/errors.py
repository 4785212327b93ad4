"""Exception hierarchy shared by all lbvcnn modules."""


class LbvError(Exception):
    """Base class for every error raised by lbvcnn."""


class InvalidShapeError(LbvError, ValueError):
    pass


class TensorFormatError(LbvError, ValueError):
    """Raised when a tensor or bank file cannot be parsed."""


class BadMagicError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class BankValidationError(LbvError, ValueError):
    """A bank entry falls outside {-1, 0, +1} or a bank id does not match."""


class NonFiniteError(LbvError, FloatingPointError):
    pass


class CheckpointError(LbvError, ValueError):
    pass


class InvariantError(LbvError, AssertionError):
    """An internal invariant was violated (never a user error)."""
