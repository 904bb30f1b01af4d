"""Exception hierarchy shared by every hrdyn module."""


class HrdynError(Exception):
    """Base class for all errors raised by hrdyn."""


class ConfigurationError(HrdynError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(HrdynError, ValueError):
    """Input data violates an operation's preconditions."""


class DegenerateSegmentError(InputError):
    """A segment has (near) zero variance and cannot be normalized."""


class UndefinedCorrelationError(InputError):
    """A correlation was requested for a zero-variance series."""


class EstimatorChoiceError(HrdynError, ValueError):
    """The requested estimator cannot handle the input dimensionality."""


class ShapeError(HrdynError, ValueError):
    """Array shapes do not agree."""


class PoisonedUpdateError(HrdynError, FloatingPointError):
    """A non-finite gradient reached the optimizer; parameters were left untouched."""


class NonFiniteLossError(HrdynError, FloatingPointError):
    """The training or gradient-check loss became NaN or infinite."""


class GradientCheckError(HrdynError, AssertionError):
    """Backpropagated gradients disagree with finite differences."""


class ParseError(InputError):
    """A session file could not be parsed.

    ``path`` and ``line`` (1-based, header is line 1) are set when known.
    """

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
