"""Exception hierarchy.

Each class carries the CLI exit code it maps to: 2 for configuration
problems, 3 for contract violations, 4 for I/O and file-format problems.
"""


class CamNormError(Exception):
    exit_code = 3


class ConfigError(CamNormError, ValueError):
    exit_code = 2


class ContractViolation(CamNormError):
    exit_code = 3


class DimensionError(ContractViolation, ValueError):
    pass


class EmptyGroupError(ContractViolation, ValueError):
    pass


class SingletonGroupError(ContractViolation, ValueError):
    pass


class StatsMissingError(ContractViolation, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "statistics missing"


class LabelError(ContractViolation, ValueError):
    pass


class SamplingError(ContractViolation, ValueError):
    pass


class DataIntegrityError(ContractViolation, ValueError):
    pass


class FormatError(CamNormError, ValueError):
    exit_code = 4


class ParseError(FormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(FormatError):
    pass


class OutputExistsError(CamNormError, FileExistsError):
    exit_code = 4
