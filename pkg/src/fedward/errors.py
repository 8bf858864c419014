"""Exception types shared across the simulator."""


class FedwardError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedwardError):
    """Invalid experiment configuration or infeasible parameter combination."""


class ParameterError(FedwardError):
    """Invalid operation parameter (e.g. trigger patch out of bounds)."""


class ArchitectureError(FedwardError):
    """Model states or stats from incompatible architectures."""


class InputError(FedwardError):
    """Malformed runtime input (e.g. negative data volumes)."""


class UnsupportedTriggerError(FedwardError):
    """Operation not defined for this trigger kind."""


class TrainingDivergenceError(FedwardError):
    """Non-finite loss during training; carries provenance."""

    def __init__(self, message, round_index=None, batch_index=None):
        super().__init__(message)
        self.round_index = round_index
        self.batch_index = batch_index

    def __str__(self):
        loc = []
        if self.round_index is not None:
            loc.append(f"round={self.round_index}")
        if self.batch_index is not None:
            loc.append(f"batch={self.batch_index}")
        base = super().__str__()
        return f"{base} ({', '.join(loc)})" if loc else base
