"""Exception types shared across the package."""


class MidlError(Exception):
    """Base class for all package errors."""


class DimensionError(MidlError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(MidlError, ValueError):
    """A caller violated an operation's precondition."""


class ValidationError(MidlError, ValueError):
    """A user-supplied value (probabilities, dataset spec, ...) is invalid."""


class ConfigurationError(MidlError, ValueError):
    """Model, dataset or experiment configuration is inconsistent."""


class FeatureFileError(MidlError, ValueError):
    """A feature file could not be parsed.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DivergenceError(MidlError, RuntimeError):
    """Training produced a non-finite loss."""
