"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes, so new failure modes should
reuse an existing class where the meaning fits.
"""


class PeftSearchError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PeftSearchError):
    """Tensor extents do not conform (e.g. matmul inner dimensions)."""


class DataError(PeftSearchError):
    """Invalid or empty dataset input."""


class ConfigError(PeftSearchError):
    """Inconsistent or out-of-range configuration."""


class NumericError(PeftSearchError):
    """A computation produced non-finite values."""


class CheckpointError(PeftSearchError):
    """Checkpoint file is corrupt, incompatible, or version-mismatched."""


class RetrievalIndexError(PeftSearchError):
    """Embedding index is empty, corrupt, or tied to a different checkpoint."""
