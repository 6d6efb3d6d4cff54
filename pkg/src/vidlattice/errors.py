"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 usage, 2 data, 3 numeric.
"""


class LatticeError(Exception):
    exit_code = 2


class UsageError(LatticeError):
    exit_code = 1


class ConfigurationError(UsageError):
    """Bad or unknown configuration, missing backbone weights, bad window spec."""


class ContractViolation(LatticeError, ValueError):
    """A caller broke an operation's precondition (shape mismatch, duplicates, ...)."""

    exit_code = 1


class InputError(LatticeError):
    """A video or data file could not be read."""


class EmptyVideoError(InputError):
    pass


class PipelineOrderError(LatticeError):
    """A stage was run before the artifacts it consumes exist."""


class ConfigMismatchError(LatticeError):
    """Artifacts produced under different configurations were mixed."""


class LookupFailure(LatticeError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class NumericError(LatticeError, FloatingPointError):
    exit_code = 3


class DegenerateEmbeddingError(NumericError):
    """A raw embedding is constant, so it has zero norm after centering."""


class MiningError(LatticeError):
    """No valid negative exists in the batch for some anchor."""
