"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: usage problems are caught by argparse,
DataError descendants exit 2, NumericError exits 3.
"""


class PointgrowError(Exception):
    """Base class for all toolkit errors."""


class DataError(PointgrowError):
    """Invalid input data: bad files, out-of-range values, shape mismatches."""


class MissingFileError(DataError):
    """A required input file does not exist."""


class MalformedPNGError(DataError):
    """The file exists but is not a decodable PNG."""


class UnsupportedFormatError(DataError):
    """Decodable image, but not a supported mode/bit depth."""


class InvalidClassError(DataError):
    """A class index is outside [0, num_classes)."""


class ShapeMismatchError(DataError):
    """Array dimensions of paired inputs disagree."""


class CheckpointError(DataError):
    """Checkpoint file is unreadable: bad magic, version, or truncation."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint ends before all declared fields."""


class NumericError(PointgrowError):
    """Non-finite values where finite arithmetic was required."""
