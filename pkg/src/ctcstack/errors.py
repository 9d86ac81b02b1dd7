"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes: UsageError -> 1,
DataFormatError -> 2, NumericError -> 3.
"""


class UsageError(Exception):
    """Caller violated a documented precondition (bad argument, bad config)."""


class DataFormatError(Exception):
    """On-disk data is malformed: manifests, feature files, checkpoints."""


class NumericError(Exception):
    """A numeric contract was violated (non-finite input, failed tolerance)."""
