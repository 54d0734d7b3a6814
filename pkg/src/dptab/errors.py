"""Exception hierarchy shared across the package."""


class DPTabError(Exception):
    """Base class for all package errors."""


class ContractViolation(DPTabError, ValueError):
    """An operation was called with inputs that break its preconditions."""


class NumericFault(DPTabError, FloatingPointError):
    """A primitive produced a non-finite value."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite output from op '{op}'")


class ConfigError(DPTabError, ValueError):
    """Invalid model, PEFT, DP or experiment configuration."""


class DataError(DPTabError):
    """Input data could not be ingested."""


class InfeasibleBudget(DPTabError):
    """No noise multiplier in the search range meets the privacy target."""


class CheckpointError(DPTabError):
    """Base class for checkpoint read failures."""


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass
