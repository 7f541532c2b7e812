"""Exception hierarchy shared across the package.

InputError and its subclasses map to CLI exit code 2 (bad input);
InvariantError maps to exit code 1 (internal bug).
"""


class DflocError(Exception):
    """Base class for all package errors."""


class InputError(DflocError):
    """Malformed or inconsistent user-supplied data (file, flag, frame)."""


class ConfigError(InputError):
    """Site / scenario configuration violates a documented constraint."""


class InsufficientDataError(InputError):
    """Not enough samples to perform an estimate."""


class NotCalibratedError(InputError):
    """A method was run without the calibration data it requires."""


class PathError(InputError):
    """A requested trajectory cannot be realized (e.g. crosses a wall)."""


class InvariantError(DflocError):
    """An internal invariant was violated; indicates a bug, not bad input."""
