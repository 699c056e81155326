"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A config value is missing, malformed, or inconsistent."""


class ManifestError(ValueError):
    """Dataset ingestion failed (missing file, ragged CSV, bad row)."""


class InfeasibleTargetError(ValueError):
    """The label sequence cannot be aligned to the available frames."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""
