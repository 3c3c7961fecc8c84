"""Exception types shared across modules."""


class FieldError(ValueError):
    """Invalid value for a named configuration field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class ConfigError(ValueError):
    """Run configuration failed validation; ``path`` is the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, corrupt, or inconsistent."""
