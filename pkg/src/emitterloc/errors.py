"""Exception hierarchy shared by every stage of the localization pipeline."""


class EmitterLocError(Exception):
    """Base class for all errors raised by emitterloc."""


class FormatError(EmitterLocError):
    """Malformed or unsupported image file content."""


class UnsupportedError(EmitterLocError):
    """Well-formed input that uses a feature outside the supported subset."""


class IoError(EmitterLocError, OSError):
    """File could not be read or written."""


class RangeError(EmitterLocError, ValueError):
    """A value falls outside the representable range of the target format."""


class BoundsError(EmitterLocError, IndexError):
    """A region of interest extends past the parent image."""


class ParameterError(EmitterLocError, ValueError):
    """Invalid configuration or argument value."""


class DegenerateInputError(EmitterLocError, ValueError):
    """Input carries no usable structure (e.g. a uniform region)."""


class FitError(EmitterLocError):
    """A least-squares fit could not be solved."""


class SaddlePointError(FitError):
    """Fitted quadratic surface has no minimum (Hessian not positive definite)."""


class NumericalError(EmitterLocError, ArithmeticError):
    """A computation produced a non-finite value."""


class SingularInformationError(NumericalError):
    """Fisher information matrix is singular or badly conditioned."""


class RegistrationError(EmitterLocError):
    """The write field could not be registered from its alignment marks."""


class MarkNotFoundError(RegistrationError):
    """An alignment mark could not be registered.

    ``index`` is the zero-based position of the mark in the nominal mark list.
    """

    def __init__(self, index, reason=""):
        self.index = index
        self.reason = reason
        msg = f"alignment mark {index} not found"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class ConvergenceError(RegistrationError):
    """Iterative rotation correction did not settle; carries the angle history (degrees)."""

    def __init__(self, angles):
        self.angles = list(angles)
        super().__init__(
            f"rotation did not converge after {len(self.angles)} iterations: "
            + ", ".join(f"{a:.5f}" for a in self.angles)
        )
