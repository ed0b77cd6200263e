"""Exception hierarchy shared by every module."""


class HistPruneError(Exception):
    """Base class for all package errors."""


class InvalidScenarioError(HistPruneError):
    pass


class InvalidArgumentError(HistPruneError, ValueError):
    pass


class ShapeError(HistPruneError, ValueError):
    pass


class NumericError(HistPruneError, ArithmeticError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class InfeasibleScenarioError(HistPruneError):
    def __init__(self, message: str, layer: int):
        super().__init__(message)
        self.layer = layer


class ProtocolError(HistPruneError):
    pass


class TransferError(HistPruneError):
    pass


class AugmentationInfeasibleError(HistPruneError):
    pass


class InsufficientDataError(HistPruneError):
    pass


class AssistantUnavailableError(HistPruneError):
    pass


class LibraryError(HistPruneError):
    pass
