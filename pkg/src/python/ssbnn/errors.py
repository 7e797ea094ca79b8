"""
ssbnn Errors
============

Exception hierarchy shared by the library and the command line. Every error
carries the process exit code the CLI reports for it.
"""

from typing import Optional


class SSBNNError(Exception):
    """Base class for all ssbnn errors"""

    exit_code = 1


class InvalidParameterError(SSBNNError, ValueError):
    """A parameter violates its documented domain"""


class ShapeError(SSBNNError, ValueError):
    """Array dimensions do not match the network architecture"""


class LabelIndexError(SSBNNError, IndexError):
    """Class label outside 0..classes-1"""


class CapacityError(SSBNNError):
    """Exact enumeration would exceed the oracle's hard size limits"""


class DataError(SSBNNError):
    """Malformed or inconsistent input data"""

    exit_code = 2


class IdxFormatError(DataError):
    """IDX container could not be parsed"""

    def __init__(self, message: str, path: str = "", offset: Optional[int] = None):
        self.path = path
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        prefix = f"{path}: " if path else ""
        super().__init__(f"{prefix}{message}{where}")


class WrongMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CheckpointError(DataError):
    """Checkpoint file could not be read"""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSizeError(CheckpointError):
    pass


class NumericalFailureError(SSBNNError):
    """Non-finite values appeared during optimization or prediction"""

    exit_code = 3

    def __init__(self, message: str, group: str = "", layer: Optional[int] = None,
                 slot: Optional[tuple] = None):
        self.group = group
        self.layer = layer
        self.slot = slot
        if layer is not None:
            message = f"{message} (group={group}, layer={layer}, slot={slot})"
        super().__init__(message)


class InternalInconsistencyError(NumericalFailureError):
    """A sample is impossible under the state it was supposedly drawn from"""


class InfeasibleModelError(NumericalFailureError):
    """A selected point model has no connected input-to-output path"""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class OracleCheckFailure(SSBNNError):
    """At least one oracle check fell outside its tolerance"""

    exit_code = 4
