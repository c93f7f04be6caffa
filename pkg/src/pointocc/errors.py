"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies instead of bare ValueError.
"""


class PointOccError(Exception):
    """Base class for all package errors."""


class ShapeError(PointOccError):
    """Tensor dimensions do not line up for an operation."""


class ConfigError(PointOccError):
    """Invalid configuration value (bad bounds, rates, sizes...)."""


class DataError(PointOccError):
    """Problem with input data (labels out of range, empty dataset...)."""


class ContractError(PointOccError):
    """A documented precondition of an operation was violated."""


class NumericError(PointOccError):
    """Non-finite values where finite ones are required (divergence)."""


class VerificationError(PointOccError):
    """A verification harness (gradient checks, oracles) failed."""


class ContainerError(DataError):
    """Base class for tensor-container load failures."""


class ContainerVersionError(ContainerError):
    """Container or blob carries an unsupported format version."""


class ContainerChecksumError(ContainerError):
    """Stored checksum does not match the payload; names the tensor."""


class ContainerTruncatedError(ContainerError):
    """Payload is shorter than the manifest promises."""
