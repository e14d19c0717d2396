"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its precondition."""


class NumericalOverflowError(ArithmeticError):
    """Logits or gradients became non-finite."""


class ConfigError(ValueError):
    """A configuration value is invalid or unknown."""


class ParseError(ValueError):
    """A line-oriented record file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(ValueError):
    """A checkpoint failed its checksum."""


class VersionError(ValueError):
    """A file carries a format version this package does not read."""


class UndefinedKLError(ArithmeticError):
    """KL(p || q) is infinite because q has zero mass where p does not."""
