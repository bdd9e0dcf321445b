"""Exception hierarchy with stable CLI exit codes.

Exit code map: 0 ok, 2 usage, 3 I/O, 4 format, 5 config, 6 data.
I/O failures are plain OSError and are mapped to 3 at the CLI boundary.
"""


class ReformError(Exception):
    """Base class for all engine errors."""

    exit_code = 1


class UsageError(ReformError):
    """Bad command-line invocation."""

    exit_code = 2


class FormatError(ReformError):
    """On-disk artifact is malformed: bad magic, version, or declared layout."""

    exit_code = 4


class CorruptFileError(FormatError):
    """Header and payload disagree (truncation, shape mismatch)."""


class ConfigError(ReformError):
    """Invalid configuration or contract violation at configuration level."""

    exit_code = 5


class PositionError(ConfigError):
    """Position IDs would exceed the model's rotary range."""


class SchemaError(ConfigError):
    """Tensor or vector dimensions disagree with the declared schema."""


class SelectionError(ConfigError):
    """Head selection cannot be satisfied under the stated constraints."""


class DataError(ReformError):
    """Invalid runtime data: tokens, scores, datasets."""

    exit_code = 6


class InputError(DataError):
    """Malformed operation input (bad token IDs, non-monotone positions, ...)."""


class QueryError(DataError):
    """Query is unusable for scoring (e.g. fully masked)."""


class SplitError(DataError):
    """Input cannot be split into context and query under the given rule."""
