class ConfigurationError(ValueError):
    """Raised when a configuration or its combination with an input is invalid."""


class ShapeError(ValueError):
    """Raised when tensor dimensions disagree with what an operation expects."""


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a metric or mixing rule."""
