"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, argument, or shape contract violation."""


class DataError(RuntimeError):
    """Dataset ingestion failure (missing files, broken pairs, bad manifests)."""


class NumericError(RuntimeError):
    """Non-finite value produced during a forward or loss evaluation."""


class TrainingError(RuntimeError):
    """Training diverged or could not complete; message carries the epoch index."""
