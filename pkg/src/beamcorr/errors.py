"""Exception types shared across beamcorr.

The CLI maps each class to a process exit code.
"""


class BeamcorrError(Exception):
    exit_code = 1


class ValidationError(BeamcorrError, ValueError):
    """Invalid parameter, configuration key or input shape."""

    exit_code = 2


class CorruptionError(BeamcorrError):
    """A data file is truncated, mislabelled or otherwise unreadable."""

    exit_code = 3


class ConvergenceError(BeamcorrError):
    exit_code = 4
