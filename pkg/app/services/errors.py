"""
Exception hierarchy shared by the services.
The CLI maps each family to its exit code; library code only raises.
"""


class Inpatient2VecError(Exception):
    """Base class for every error raised by the services."""

    exit_code = 1


class InputError(Inpatient2VecError):
    """Bad input file, flag or specification."""

    exit_code = 2


class CohortFormatError(InputError):
    """A cohort file that does not follow the JSON Lines schema."""

    def __init__(self, message: str, line_number: int = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ConfigError(InputError):
    """Invalid configuration value or unknown key."""

    def __init__(self, message: str, field: str = None):
        self.field = field
        super().__init__(message)


class CompatibilityError(Inpatient2VecError):
    """Checkpoint format or vocabulary does not match the data it is used with."""

    exit_code = 3


class NumericalError(Inpatient2VecError, ArithmeticError):
    """A tensor operation produced NaN or Inf."""

    exit_code = 4


class DivergenceError(NumericalError):
    """Training loss stopped being finite."""

    def __init__(self, message: str, epoch: int = None, batch: int = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)
