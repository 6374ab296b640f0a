"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps ConfigError to exit code 2 and DataError to exit code 3.
"""


class PSGError(Exception):
    """Base class for all pipeline errors"""


class ConfigError(PSGError, ValueError):
    """Invalid configuration value, unknown key or inconsistent settings"""


class DataError(PSGError, ValueError):
    """Malformed records, missing artifacts, leaking splits or unusable labels"""


class ShapeError(PSGError, ValueError):
    """Operands whose shapes cannot be combined"""

    def __init__(self, op: str, left, right, detail: str = ''):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class NumericsError(PSGError, ArithmeticError):
    """A value, gradient or recurrent state became NaN or infinite"""
