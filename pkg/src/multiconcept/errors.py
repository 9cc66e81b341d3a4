"""Exception hierarchy shared across the package.

Every error carries a machine-readable ``category`` which the CLI turns into an
exit code (``config`` -> 2, everything else -> 1).
"""


class MulticonceptError(Exception):
    category = "runtime"


class ConfigError(MulticonceptError, ValueError):
    category = "config"


class IngestionError(MulticonceptError, ValueError):
    category = "config"


class ContractError(MulticonceptError, ValueError):
    """Shapes or preconditions of an operation were violated."""

    category = "contract"


class CapabilityError(MulticonceptError, RuntimeError):
    category = "capability"


class InitializationError(MulticonceptError, RuntimeError):
    category = "initialization"


class EvaluationError(MulticonceptError, RuntimeError):
    category = "evaluation"
