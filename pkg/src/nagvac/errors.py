"""Exception hierarchy shared by all modules."""


class NagvacError(Exception):
    """Base class for library errors."""


class InputError(NagvacError, ValueError):
    """Array shapes or arguments are inconsistent."""


class ConfigurationError(NagvacError, ValueError):
    """A model or training configuration is invalid."""


class DataError(NagvacError, ValueError):
    """Input data violates the model's support or the file format."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class NumericalError(NagvacError, ArithmeticError):
    """A computation produced non-finite values or failed to factorize."""


class SingularScaleError(NumericalError):
    """Some idiosyncratic scale c_i is (numerically) zero."""


class DegenerateLoadingError(NumericalError):
    """The rank-1 factor loading vector is zero."""


class SingularBlockError(NumericalError):
    """A diagonal entry needed by the closed-form rank-1 solve vanished."""


class NotPositiveDefiniteError(NumericalError):
    """CG met non-positive curvature in the Fisher operator."""


class DegenerateProposalError(NumericalError):
    """All importance weights underflowed."""


class DivergenceError(NumericalError):
    """Variational parameters became non-finite during training."""
