"""Exception hierarchy shared across the package."""


class CarprefError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CarprefError, ValueError):
    exit_code = 2


class SequenceError(CarprefError, ValueError):
    """A residue string is not a valid CDR3."""


class OverLengthError(CarprefError, ValueError):
    pass


class MutationError(CarprefError, ValueError):
    pass


class DuplicatePositionError(MutationError):
    pass


class OutOfRangeError(MutationError, IndexError):
    pass


class IdentitySubstitutionError(MutationError):
    pass


class ParseError(CarprefError, ValueError):
    """Malformed row or line in an input file; ``line`` is 1-based."""

    exit_code = 3

    def __init__(self, line, reason, path=None):
        self.line = line
        self.reason = reason
        self.path = path
        where = f"{path}:" if path else ""
        super().__init__(f"{where}line {line}: {reason}")


class EmptyBatchError(CarprefError, ValueError):
    pass


class DegenerateSplitError(CarprefError, ValueError):
    pass


class NonFiniteError(CarprefError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class LengthMismatchError(CarprefError, ValueError):
    pass


class DegenerateVarianceError(CarprefError, ValueError):
    pass


class LengthOutOfRangeError(CarprefError, ValueError):
    pass


class MissingReferenceError(CarprefError, KeyError):
    pass


class ZeroReferenceError(CarprefError, ZeroDivisionError):
    pass


class MissingActivationError(CarprefError, KeyError):
    pass
