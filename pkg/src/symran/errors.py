"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage requires an artifact that has not been produced."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""
