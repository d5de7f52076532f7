"""Exception hierarchy shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`DataError` to
exit code 3; anything else is exit code 1.
"""


class AffectLabError(Exception):
    pass


class ConfigError(AffectLabError, ValueError):
    """Bad configuration value, unknown config key, or violated precondition."""


class DataError(AffectLabError, ValueError):
    """Malformed input data (files, labels, images)."""


class MalformedImageError(DataError):
    pass


class InvalidLabelError(DataError):
    pass


class AlignmentError(DataError):
    """Prediction and label rows do not share the same ids."""


class ShapeError(AffectLabError, ValueError):
    pass


class IncompatibleCheckpointError(AffectLabError):
    pass


class NonFiniteGradientError(AffectLabError, FloatingPointError):
    def __init__(self, bad_params):
        self.bad_params = list(bad_params)
        shown = ", ".join(self.bad_params[:5])
        more = "" if len(self.bad_params) <= 5 else f" (+{len(self.bad_params) - 5} more)"
        super().__init__(f"non-finite gradient in {shown}{more}; step aborted")
