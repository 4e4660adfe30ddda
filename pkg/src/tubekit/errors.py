"""Exception hierarchy shared by all tubekit modules.

The CLI maps each class to a distinct exit code, so raise the most
specific one that applies.
"""


class TubekitError(Exception):
    """Base class for all tubekit failures."""


class ParameterError(TubekitError):
    """Invalid argument: bad shape, out-of-range value, unknown option."""


class FileFormatError(TubekitError):
    """Malformed or unreadable .tvol file; message names the bad field."""


class NumericDomainError(TubekitError):
    """Operation mathematically undefined for this input (e.g. empty label)."""
