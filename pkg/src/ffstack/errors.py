"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, MissingArtifactError -> 3,
everything else derived from NumericalError -> 4.
"""


class FFStackError(Exception):
    """Base class for all package errors."""


class ConfigError(FFStackError):
    """Invalid configuration value or malformed config file."""


class ParseError(FFStackError):
    """Malformed input file; message names the offending line where possible."""


class ValidationError(FFStackError):
    """Domain-type invariant violated (bad shapes, non-finite values, ...)."""


class MissingArtifactError(FFStackError):
    """A required upstream artifact (dataset, checkpoint) is absent."""


class NumericalError(FFStackError):
    """Numerical failure during evaluation, training or simulation."""


class EvaluationError(NumericalError):
    """Force/energy evaluation failed (overlapping atoms, NaN on tape, ...)."""


class TrainingError(NumericalError):
    """Training diverged or produced non-finite loss."""


class GenerationError(NumericalError):
    """Dataset generation failed (trajectory blow-up, escaping atoms)."""
