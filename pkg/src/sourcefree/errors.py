"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration. Carries every problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IngestionError(OSError):
    """A dataset file is missing or unreadable."""


class ContractError(ValueError):
    """An operation was called with inputs that violate its preconditions."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""
