"""Exception hierarchy shared by every feddrm module."""


class FedDRMError(Exception):
    """Base class for all package errors."""


class ConfigError(FedDRMError, ValueError):
    """Invalid or incomplete configuration."""


class DataError(FedDRMError, ValueError):
    """Malformed input data (labels out of range, wrong channel count, bad files)."""


class NumericInputError(DataError):
    """Non-finite values where finite ones are required."""


class ContractError(FedDRMError, ValueError):
    """Caller broke an API contract (mismatched caches, shapes, list lengths)."""


class PartitionError(FedDRMError):
    """A partitioner could not produce a valid assignment."""


class SolverError(FedDRMError):
    """An iterative solver failed to converge."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class DomainError(FedDRMError, ValueError):
    """Arguments outside the mathematical domain of a formula."""


class DivergenceError(FedDRMError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message: str, round_index: int = -1, step: int = -1, client: int = -1):
        super().__init__(message)
        self.round_index = round_index
        self.step = step
        self.client = client
