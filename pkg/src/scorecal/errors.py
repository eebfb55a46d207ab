"""Exception and warning types shared across the toolkit."""


class ScorecalError(Exception):
    """Base class for all toolkit errors."""


class FormatError(ScorecalError, ValueError):
    """A file does not follow its documented on-disk format."""


class ValidationError(ScorecalError, ValueError):
    """Inputs violate an operation's preconditions."""


class ConvergenceWarning(UserWarning):
    """An iterative optimizer stopped before meeting its tolerance."""


class CalibrationWarning(UserWarning):
    """Calibration hit a parameter bound (e.g. separable training data)."""


class PolarityWarning(UserWarning):
    """Scores look inverted (EER above one half)."""
