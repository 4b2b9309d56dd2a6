"""Exception taxonomy shared by every module.

Each error carries a short machine-readable ``category`` so the CLI can emit
``error:<category>: <message>`` lines on stderr.
"""


class RscError(Exception):
    """Base class for all engine errors."""

    category = "internal"


class UsageError(RscError):
    """Bad command-line flags or argument combinations."""

    category = "usage"


class ShapeError(RscError):
    """Tensor extents are invalid or incompatible."""

    category = "shape"


class RangeError(RscError):
    """A scalar argument is outside its documented range."""

    category = "range"


class DomainError(RscError):
    """The operation is undefined for this input (wrong kind, empty data)."""

    category = "domain"


class StateError(RscError):
    """An object is not in the state the operation requires."""

    category = "state"


class FormatError(RscError):
    """A file on disk does not follow its declared binary/text format."""

    category = "format"


class CompatibilityError(RscError):
    """Two artifacts (archive/profile/cache) do not belong together."""

    category = "compatibility"


class ProfileError(RscError):
    """An architecture profile violates its invariants."""

    category = "profile"


class FileError(RscError):
    """A required path is missing or unwritable."""

    category = "file"
