"""Exception types shared across modules."""


class TpgForestError(Exception):
    pass


class ConfigError(TpgForestError, ValueError):
    """Bad configuration value or unknown key."""


class PlacementInfeasible(TpgForestError):
    """Forest generation hit the consecutive-rejection limit."""

    def __init__(self, message: str, seed: int | None = None):
        super().__init__(message)
        self.seed = seed


class EpisodeFinished(TpgForestError):
    """``step`` was called after a terminal step."""


class ParseError(TpgForestError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class ValidationError(TpgForestError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class MismatchError(TpgForestError, ValueError):
    """A trajectory log does not belong to the given forest/config."""
