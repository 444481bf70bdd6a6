"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised for invalid configuration values or mismatched shapes/sizes."""


class IntegrityError(RuntimeError):
    """Raised when persisted artifacts disagree with their recorded hashes."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values; the message
    names the offending tensor role."""


class PipelineError(RuntimeError):
    """Raised when a pipeline stage fails; the message names the stage."""
