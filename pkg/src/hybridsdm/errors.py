"""Exception hierarchy shared by every hybridsdm module."""


class HybridSDMError(Exception):
    """Base class for all library errors."""


class DimensionError(HybridSDMError, ValueError):
    pass


class DomainError(HybridSDMError, ValueError):
    pass


class ParameterError(HybridSDMError, ValueError):
    pass


class ContractError(HybridSDMError, RuntimeError):
    pass


class TrainingError(HybridSDMError, RuntimeError):
    pass


class IngestionError(HybridSDMError, ValueError):
    """Raised with a list of per-line problems found while reading observations."""

    def __init__(self, message, problems=()):
        self.problems = list(problems)
        if self.problems:
            detail = "; ".join(self.problems[:10])
            if len(self.problems) > 10:
                detail += f"; ... ({len(self.problems) - 10} more)"
            message = f"{message}: {detail}"
        super().__init__(message)


class GenerationError(HybridSDMError, RuntimeError):
    pass


class CheckpointError(HybridSDMError, ValueError):
    pass


class UndefinedMetricError(HybridSDMError, ValueError):
    pass
