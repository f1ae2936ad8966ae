"""Exception hierarchy shared across the library."""


class SpdGeoError(Exception):
    """Base class for all library errors."""


class ShapeError(SpdGeoError):
    """Array dimensions are incompatible with the requested operation."""


class NotPositiveDefinite(SpdGeoError):
    """A matrix required to be SPD has an eigenvalue at or below the floor."""


class NumericalError(SpdGeoError):
    """A numerical routine failed (non-convergence, overflow, NaN).

    ``last_iterate`` optionally carries the final state of an iterative
    method for post-mortem inspection.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class EmptyInput(SpdGeoError):
    """An operation received an empty collection that must be nonempty."""


class FormatError(SpdGeoError):
    """A data file violates its documented binary or text layout.

    ``offset`` is the byte offset of the offending field when known;
    ``record`` the index of the offending record.
    """

    def __init__(self, message, offset=None, record=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)
        self.offset = offset
        self.record = record


class InsufficientSubjects(SpdGeoError):
    """Fewer subjects than the evaluation protocol requires."""


class UnknownSubject(SpdGeoError):
    """A subject id was not present when the model was fitted."""


class TrainingError(SpdGeoError):
    """Training preconditions violated (missing class, bad labels)."""
