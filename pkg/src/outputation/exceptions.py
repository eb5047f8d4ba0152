"""Exception types raised across the package."""


class OutputationError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(OutputationError):
    """A required column is missing from an input file."""


class ParseError(OutputationError):
    """A cell could not be parsed as a finite number.

    Carries the 1-based data row index (header excluded) in ``row``.
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDataError(OutputationError):
    """No usable rows (empty file, or all clusters removed)."""


class SizeViolationError(OutputationError):
    """One or more clusters are smaller than the required per-cluster
    subsample size.  ``clusters`` lists the offending cluster ids."""

    def __init__(self, message, clusters=()):
        super().__init__(message)
        self.clusters = list(clusters)


class SingularDesignError(OutputationError):
    """The design matrix is rank deficient on the supplied data."""


class InsufficientOutputationsError(OutputationError):
    """An operation needs at least two absorbed outputations."""


class CannotAssessError(OutputationError):
    """The outputation-count rule cannot be evaluated because the chosen
    variance is non-positive for some coordinate."""

    def __init__(self, message, coordinates=()):
        super().__init__(message)
        self.coordinates = list(coordinates)


class MergeError(OutputationError):
    """Accumulators built under different plans/settings cannot merge."""


class EnumerationLimitError(OutputationError):
    """Exhaustive enumeration would exceed the combination cap.

    ``count`` holds the exact number of combinations that enumeration
    would have to visit.
    """

    def __init__(self, message, count=None):
        super().__init__(message)
        self.count = count
