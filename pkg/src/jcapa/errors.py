"""Exception types shared across the package.

Exit-code mapping used by the CLI: validation/config -> 1, numeric -> 2,
I/O and file-format -> 3.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a consumed tape)."""


class ValidationError(ValueError):
    """Input data is malformed (e.g. out-of-range label ids)."""


class ConfigError(ValueError):
    """A configuration value or combination is unusable."""


class FormatError(ValueError):
    """A binary file does not conform to its format; carries a byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CompatibilityError(ValueError):
    """Stored parameters do not match the expected model structure."""


class NumericError(RuntimeError):
    """A numeric failure such as a NaN loss or a failed gradient check."""
