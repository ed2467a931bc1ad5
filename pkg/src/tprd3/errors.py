"""Exception types shared across the package.

Each maps to a process exit code in the CLI: usage errors exit 1,
configuration errors exit 2, numerical divergence exits 3.
"""


class TprError(Exception):
    """Base class for package errors."""


class ConfigError(TprError):
    """Invalid configuration value, key, file, or checkpoint header."""


class DimensionError(TprError):
    """Operands with incompatible shapes reached a tensor op."""


class OptimizerError(TprError):
    """Optimizer invariant violated (e.g. a parameter without a gradient)."""

    def __init__(self, name, message):
        super().__init__(f"{message}: {name}")
        self.name = name


class DivergenceError(TprError):
    """Non-finite values appeared during an episode or training step."""

    def __init__(self, timestep, message="non-finite values"):
        super().__init__(f"{message} at timestep {timestep}")
        self.timestep = timestep


class UsageError(TprError):
    """Bad command line invocation."""
