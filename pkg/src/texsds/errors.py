"""Exception hierarchy shared across the pipeline.

Each branch maps to one CLI exit code, so errors must stay disjoint:
config 2, mesh/checkpoint 3, backend 4, numeric 5.
"""


class TexsdsError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TexsdsError):
    """Invalid or unknown configuration content (exit code 2)."""


class MeshError(TexsdsError):
    """Unloadable, malformed, or degenerate mesh input (exit code 3)."""


class CheckpointError(TexsdsError):
    """Corrupt or truncated checkpoint file (exit code 3)."""


class BakeError(MeshError):
    """UV atlas unusable for baking, e.g. overlapping charts."""


class BackendError(TexsdsError):
    """Guidance backend failed after exhausting its retry policy (exit code 4)."""


class BackendUnavailableError(BackendError):
    """Transient backend failure; safe to retry."""


class ProtocolError(BackendError):
    """Malformed request/response or version mismatch; never retried."""


class NumericError(TexsdsError):
    """Non-finite values encountered during optimization (exit code 5)."""
