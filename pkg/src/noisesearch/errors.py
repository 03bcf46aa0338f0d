class NoiseSearchError(Exception):
    pass


class DomainError(NoiseSearchError, ValueError):
    """Input outside the mathematical domain of an operation."""


class StateError(NoiseSearchError, RuntimeError):
    """Operation not valid for the current sampler state."""


class ConfigError(NoiseSearchError, ValueError):
    """Invalid user configuration.

    ``line`` and ``where`` are filled in by the config parser so the CLI can
    point at the offending input.
    """

    def __init__(self, message: str, line: int | None = None, where: str | None = None):
        self.line = line
        self.where = where
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if where is not None:
            prefix += f"{where}: "
        super().__init__(prefix + message)


class LedgerError(NoiseSearchError, AssertionError):
    """A budget ledger invariant was violated. Always a bug."""
