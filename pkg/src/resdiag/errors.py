"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems
exit with 2, data problems with 3 and numerical failures with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, unknown key or malformed config file."""


class DataError(ValueError):
    """Malformed input data: bad CSV rows, out-of-range ids, corrupt checkpoints."""


class NumericsError(ArithmeticError):
    """Non-finite values or a diverging optimisation run."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given input (e.g. single-class AUC)."""


class LatentMasteryError(TypeError):
    """Concept-level mastery was requested from a model whose proficiency is latent."""
