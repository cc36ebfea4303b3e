"""Exception hierarchy shared by every module of the package."""


class RegistrationError(Exception):
    """Base class for all errors raised by deformreg."""


class NiftiFormatError(RegistrationError):
    """Malformed NIfTI header or payload."""


class UnsupportedError(RegistrationError):
    """Valid input that this engine deliberately does not handle."""


class ShapeError(RegistrationError, ValueError):
    """Geometry or array-shape mismatch between inputs."""


class InvalidTransformError(RegistrationError, ValueError):
    pass


class RegistrationFailedError(RegistrationError):
    pass


class DivergenceError(RegistrationError):
    """Raised when the loss becomes non-finite during optimization."""

    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class DegenerateInputError(RegistrationError, ValueError):
    """Input for which the requested statistic or metric is undefined."""


class NonInvertibleFieldError(RegistrationError, ValueError):
    pass


class InputError(RegistrationError, ValueError):
    pass
