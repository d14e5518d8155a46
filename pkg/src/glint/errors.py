"""Exception hierarchy and process exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_OOM = 4
EXIT_INTERNAL = 5


class GlintError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = EXIT_INTERNAL


class ConfigError(GlintError):
    """Bad run configuration: missing files, conflicting flags, invalid parameters."""

    exit_code = EXIT_CONFIG


class FormatError(GlintError):
    """Malformed on-disk data or an invalid model document."""

    exit_code = EXIT_FORMAT


class StoreCapacityError(ConfigError):
    """A file-backed store would exceed the configured external capacity."""


class DeviceCapacityError(GlintError):
    """A single node's batch footprint exceeds device capacity; no retry can help."""

    exit_code = EXIT_OOM


class InternalError(GlintError):
    """An internal invariant was violated; indicates a bug, not bad input."""
