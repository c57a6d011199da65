"""Exception taxonomy shared across the package.

CLI exit-code mapping: usage errors -> 1, data errors -> 2, numerical
failures -> 3 (see cli.py).
"""


class RankDistillError(Exception):
    """Base class for all package errors."""


class UsageError(RankDistillError):
    """Bad arguments or configuration supplied by the caller."""


class DataError(RankDistillError):
    """Input data is missing, malformed, or inconsistent."""


class NumericalFailure(RankDistillError):
    """A numerical procedure diverged or failed to converge."""


# --- linalg ---

class InvalidMatrix(UsageError):
    pass


class DegenerateSpectrum(DataError):
    pass


class InvalidThreshold(UsageError):
    pass


class InvalidRank(UsageError):
    pass


# --- model ---

class InvalidConfig(UsageError):
    pass


class InvalidSequence(UsageError):
    pass


class CorruptCheckpoint(DataError):
    pass


class ShapeError(UsageError):
    pass


# --- train ---

class InsufficientData(DataError):
    pass


# --- prune ---

class UnreachableTarget(DataError):
    pass


class ScheduleMismatch(UsageError):
    pass


class InvalidSparsity(UsageError):
    pass


# --- distill ---

class InvalidK(UsageError):
    pass


class CorruptCache(DataError):
    pass


class CacheMismatch(DataError):
    pass


class InvalidTeacher(UsageError):
    pass


# --- pipeline ---

class InvalidFraction(UsageError):
    pass
