class ConfigurationError(ValueError):
    """Invalid task, network or run configuration."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
