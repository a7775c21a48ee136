"""Exception hierarchy shared by the core package, service, and CLI.

Each class carries the process exit code the CLI uses and a short machine
readable ``kind`` the service puts into error payloads.
"""


class ReldistillError(Exception):
    exit_code = 1
    kind = "internal"


class ConfigError(ReldistillError):
    """Invalid configuration value, unknown key, or bad argument."""

    exit_code = 2
    kind = "config"


class DataError(ReldistillError):
    """Dataset problems: missing paths, malformed files, insufficient samples."""

    exit_code = 3
    kind = "data"


class CheckpointError(DataError):
    """Unreadable or incompatible checkpoint archive."""


class DivergenceError(ReldistillError):
    """Training produced a non-finite loss; last good checkpoint retained."""

    exit_code = 4
    kind = "divergence"


class ZeroNormError(DivergenceError):
    """An embedding collapsed to the zero vector, so cosine is undefined."""
