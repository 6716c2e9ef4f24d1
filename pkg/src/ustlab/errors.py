"""Exception hierarchy shared across the package."""


class UstLabError(Exception):
    """Base class for all package errors."""


class DomainError(UstLabError, ValueError):
    """A site or geometry falls outside the simulated window."""


class ValidationError(UstLabError, ValueError):
    """An experiment spec or argument failed validation."""


class CapacityError(UstLabError):
    """A request exceeds a configured size bound (exact-solve size, horizon)."""


class CappedRunError(UstLabError):
    """A random walk exceeded its step cap.

    The partial path is kept on ``partial`` so the caller can inspect it; the
    run is never silently truncated.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class UnsupportedConventionError(UstLabError):
    """The operation needs a boundary convention the realization lacks."""


class UndefinedResistanceError(UstLabError):
    """The ball covers everything, so no exterior is left to ground."""


class InconclusiveError(UstLabError):
    """The window is too small to decide a containment clause."""


class CorruptInputError(UstLabError):
    """An input file is damaged, inconsistent, or mixes incompatible runs."""


class CorruptSnapshotError(CorruptInputError):
    """A snapshot file failed magic, version, length or tree checks."""


class RunFailedError(UstLabError):
    """Too many replicates of an experiment run raised errors."""


class ContractError(UstLabError, ValueError):
    """Inputs to a detector do not belong together."""


class InsufficientDataError(UstLabError, ValueError):
    """Too few usable points for a fit."""
