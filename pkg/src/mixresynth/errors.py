"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Dataset files missing, corrupt, or inconsistent (CLI exit code 3)."""


class NumericsError(RuntimeError):
    """A loss became non-finite during optimisation (CLI exit code 4)."""
