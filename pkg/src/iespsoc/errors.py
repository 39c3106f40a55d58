"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters, gains or run configuration."""


class DomainError(ValueError):
    """A model quantity left the domain where its formula is defined."""


class SaturationError(DomainError):
    """An electrode stoichiometry left (0, 1): depleted or overfull electrode."""

    def __init__(self, field: str, value: float, step: int | None = None):
        self.field = field
        self.value = value
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"{field}={value!r} outside (0, 1){where}")


class IngestionError(ValueError):
    """Malformed profile CSV."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"row {row}: {message}")
