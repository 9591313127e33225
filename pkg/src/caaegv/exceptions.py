"""Exception hierarchy shared by every module of the package."""


class CAAEError(Exception):
    """Base class for all package errors."""


class MalformedName(CAAEError, ValueError):
    pass


class OutOfRange(CAAEError, ValueError):
    pass


class BadChannels(CAAEError, ValueError):
    pass


class EmptySource(CAAEError, ValueError):
    pass


class ShapeMismatch(CAAEError, ValueError):
    pass


class BadConfig(CAAEError, ValueError):
    pass


class CorruptCheckpoint(CAAEError, IOError):
    pass


class DomainError(CAAEError, ValueError):
    """A probability fed to a log-loss lies outside the open interval (0, 1)."""


class NonFiniteLoss(CAAEError, FloatingPointError):
    """Raised by the trainer when a loss term becomes NaN or infinite."""

    def __init__(self, term, step=None, value=None):
        self.term = term
        self.step = step
        self.value = value
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r}{where}: {value!r}")


class SingleClassDataset(CAAEError, ValueError):
    pass


class SingleIdentityDataset(CAAEError, ValueError):
    pass


class EmptyInput(CAAEError, ValueError):
    pass


class TooFewValues(CAAEError, ValueError):
    pass
