"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(ValueError):
    """Array dimensions do not match the model or data contract."""


class TrainingError(RuntimeError):
    """Local training cannot proceed (empty dataset, non-finite update)."""
