"""Exception types shared across the package.

The CLI maps each family onto a process exit code, so library code should
raise the most specific class that applies.
"""


class EcgSoupError(Exception):
    """Base class for every error raised deliberately by ecgsoup."""


class ConfigError(EcgSoupError, ValueError):
    """Invalid hyperparameter, configuration file or degenerate setting."""


class InputError(EcgSoupError, ValueError):
    """Malformed data handed to a public function."""


class ShapeError(InputError):
    """Tensor dimensions that cannot be combined."""


class UsageError(EcgSoupError, RuntimeError):
    """API called in the wrong state (e.g. backward on a non-scalar)."""


class NumericError(EcgSoupError, FloatingPointError):
    """NaN or infinity detected by an explicit finiteness check."""


class FoldLeakError(EcgSoupError):
    """The same record id appears on both sides of a train/test split."""
