"""Reconstruct seen images from fMRI with clustered brain tokens and two image branches."""

__version__ = "0.1.0"

from .errors import CapabilityError, ConfigurationError, DivergenceError, GmmDegenerateError  # noqa: E402,F401
