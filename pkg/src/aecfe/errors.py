"""Exception types shared across the package.

Each class carries the process exit code the CLI reports for it.
"""


class AecfeError(Exception):
    exit_code = 1


class ConfigError(AecfeError, ValueError):
    exit_code = 2


class DivergenceError(AecfeError, ArithmeticError):
    exit_code = 4


class IntegrityError(AecfeError):
    exit_code = 5


class UnsupportedFeatureFile(IntegrityError):
    pass


class IncompatibleCheckpoint(IntegrityError):
    pass
