"""Exception types shared across the package.

The CLI maps these onto exit codes; everything else raises them directly.
"""


class Error(Exception):
    """Base class for all package errors."""


class ShapeError(Error):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(Error):
    """A caller violated an operation's contract (bad argument, bad state)."""


class DegenerateBatchError(ContractError):
    """Batch too small for an operation that needs batch statistics."""


class LabelError(ContractError):
    """A class or task label is outside the valid range."""


class TapeReuseError(Error):
    """backward() was called twice on the same tape."""


class PpmParseError(Error):
    """A PPM file is malformed; message includes the byte offset."""


class CheckpointError(Error):
    """A checkpoint file is malformed; message names the offending field."""


class ManifestError(Error):
    """A dataset manifest failed validation; message names field and sample."""


class DivergenceError(Error):
    """Adaptation produced a non-finite loss; message names the batch index."""


class ProtocolError(Error):
    """An evaluation protocol precondition does not hold."""


class ConfigError(Error):
    """An experiment config is malformed (unknown key, bad value, bad path)."""
