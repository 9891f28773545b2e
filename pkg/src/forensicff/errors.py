"""Exception hierarchy shared across the toolkit.

Messages deliberately carry stable phrases ("manifest parse error",
"weight archive error", ...) so callers and the CLI can surface them verbatim.
"""


class ForensicError(Exception):
    """Base class for all toolkit errors."""


class UsageError(ForensicError):
    """Bad invocation or configuration; maps to CLI exit code 2."""


class ManifestError(ForensicError):
    """Raised as "manifest parse error: ..." for unreadable manifests."""


class WeightArchiveError(ForensicError):
    """Raised as "weight archive error: ..." for inconsistent weight files."""


class GraphValidationError(ForensicError):
    """Raised as "graph validation error: ..." for structurally bad graphs."""


class FusionTopologyError(ForensicError):
    """Raised as "fusion topology error: ..." when batchnorm fusion is impossible."""


class InputShapeError(ForensicError):
    """Raised as "input shape error: ..." when a forward input does not fit the model."""


class MaskReferenceError(ForensicError):
    """Raised as "mask reference error: ..." for unknown (layer, channel) references."""


class TraceMismatchError(ForensicError):
    """Raised as "trace mismatch error: ..." when a trace does not belong to a graph."""


class EmptyDatasetError(ForensicError):
    """Raised as "empty dataset error: ..." when an image stream yields nothing usable."""


class DecodeError(ForensicError):
    """Raised as "decode error: ..." for unreadable or unsupported image files."""
