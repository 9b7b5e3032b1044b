"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError exits 2,
NumericError exits 3.
"""


class DataError(Exception):
    """Malformed or missing input data: unreadable files, shape mismatches,
    index entries pointing nowhere, ground truth of the wrong kind."""


class NumericError(Exception):
    """Numeric failure during computation: NaN/Inf in a training step,
    solver non-convergence, division guards tripping."""


class DegenerateEstimateError(NumericError):
    """All pooled statistics vanished, no direction to normalize."""
