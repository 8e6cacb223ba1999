"""Exception hierarchy shared by every module in the package.

Two broad families matter to callers: InvalidArgumentError for contract
violations by the caller, and DataError for problems with input data or
files. TrainingDivergenceError stands alone because the CLI maps it to
its own exit code.
"""


class GeoGcnError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(GeoGcnError, ValueError):
    """A caller-supplied argument violates an operation's contract."""


class DataError(GeoGcnError):
    """Input data could not be read, parsed, or validated."""


class ParseError(DataError):
    """A file is structurally malformed. Message carries file and line."""


class ValidationError(DataError):
    """Parsed data violates an invariant (non-finite values, bad normals)."""


class InvalidManifestError(DataError):
    """A dataset manifest is missing entries or references absent files."""


class DegenerateInputError(DataError):
    """Geometry too degenerate to process (coincident points, zero area)."""


class SamplingExhaustedError(DataError):
    """Rejection sampling failed to produce enough valid samples."""


class CoverageError(DataError):
    """Patch seeding failed to cover every point of the cloud."""


class TrainingDivergenceError(GeoGcnError):
    """A non-finite loss, gradient, or parameter appeared during training."""
