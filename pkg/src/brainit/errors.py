class ConfigurationError(ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class CapabilityError(RuntimeError):
    """A backend was asked for an operation it does not support."""


class DivergenceError(RuntimeError):
    """An optimization produced a non-finite loss."""


class GmmDegenerateError(RuntimeError):
    pass
