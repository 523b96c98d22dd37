"""Error taxonomy shared across the pipeline; the CLI maps these to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or option combination."""


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""
