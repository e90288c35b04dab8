"""Exception hierarchy shared across the package."""


class FramechainError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FramechainError):
    """An input or domain object violates its contract."""


class ConfigurationError(FramechainError):
    """A config file, checkpoint path, or environment requirement is invalid."""


class GatewayError(FramechainError):
    """A multimodal backend call failed after exhausting retries."""


class SchemaError(GatewayError):
    """A backend response could not be parsed into the expected structure.

    The raw payload is preserved for debugging.
    """

    def __init__(self, message: str, raw_payload=None):
        super().__init__(message)
        self.raw_payload = raw_payload


class NumericsError(FramechainError):
    """A non-finite value appeared during training or sampling."""
