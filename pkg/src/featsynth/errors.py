"""Errors with dedicated CLI exit codes, plus shared label constants."""

# Reserved sentinel for unlabeled pixels in masks (mask files store it as 255).
IGNORE_LABEL = 255


class ConfigError(ValueError):
    """Config file violates the schema (unknown key, bad type, bad value)."""

    exit_code = 2


class MissingArtifactError(FileNotFoundError):
    """A required prior artifact (checkpoint, dataset, pool) is absent."""

    exit_code = 3


class NonFiniteLossError(RuntimeError):
    """A loss term went NaN/Inf mid-run; carries the offending term name."""

    exit_code = 4

    def __init__(self, term: str, value: float, iteration: int | None = None):
        self.term = term
        self.value = value
        self.iteration = iteration
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite loss term '{term}' = {value}{where}")
