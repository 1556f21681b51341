"""Exception types shared across the package."""


class VoxSamplerError(Exception):
    """Base class for all package errors."""


class DimensionError(VoxSamplerError, ValueError):
    """Tensor shapes do not conform."""


class ContractError(VoxSamplerError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(VoxSamplerError, ArithmeticError):
    """A NaN or infinity appeared in a forward or backward pass."""


class GeometryError(VoxSamplerError, ValueError):
    """Invalid mesh or shape parameters."""


class OutOfDomainError(VoxSamplerError, ValueError):
    """A point lies outside the grid domain."""


class ConfigError(VoxSamplerError, ValueError):
    """Malformed configuration text."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class CheckpointError(VoxSamplerError, ValueError):
    """Corrupt or unsupported checkpoint file."""
