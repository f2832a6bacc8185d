"""
Exception types for the xdrec pipeline.

Every error carries an ``error_code`` string so that stage runners, the CLI
and the HTTP layer can report failures uniformly, the same way the service
layer reports ``VALIDATION_ERROR`` style codes in result dictionaries.
"""


class XDRecError(Exception):
    """Base class for all pipeline errors."""

    error_code = 'XDREC_ERROR'

    def __init__(self, message, **context):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_result(self):
        """Render the error as a failed result dictionary."""
        result = {
            'success': False,
            'message': self.message,
            'error_code': self.error_code,
        }
        result.update(self.context)
        return result


class ShapeError(XDRecError, ValueError):
    """Tensor or vector dimensions do not line up."""
    error_code = 'SHAPE_ERROR'


class AdapterLookupError(XDRecError, LookupError):
    """An adapter name was requested that is not attached."""
    error_code = 'UNKNOWN_ADAPTER'


class ItemLookupError(XDRecError, LookupError):
    """An item has no semantic ID (or is missing from the catalog)."""
    error_code = 'UNKNOWN_ITEM'


class TrainingDivergenceError(XDRecError, ArithmeticError):
    """A loss or gradient became non-finite."""
    error_code = 'TRAINING_DIVERGED'


class DeterminismError(XDRecError):
    """A loss function returned different values for identical inputs."""
    error_code = 'NON_DETERMINISTIC'


class ConstraintViolationError(XDRecError, ValueError):
    """A masked distribution was requested over an empty valid set."""
    error_code = 'CONSTRAINT_VIOLATION'


class DegenerateContextError(XDRecError, ValueError):
    """Masked-code prediction has no unmasked context to condition on."""
    error_code = 'DEGENERATE_CONTEXT'


class InputError(XDRecError, ValueError):
    """Caller supplied unusable input (empty domain, wrong domain, unfrozen model)."""
    error_code = 'INPUT_ERROR'


class IntegrityError(XDRecError):
    """Two catalog items share one full semantic ID."""
    error_code = 'INTEGRITY_ERROR'


class InvalidPrefixError(XDRecError, LookupError):
    """A token prefix is not a path of the prefix tree."""
    error_code = 'INVALID_PREFIX'


class DecodeConfigError(XDRecError, ValueError):
    """Beam search parameters are inconsistent."""
    error_code = 'DECODE_CONFIG_ERROR'


class FusionWeightError(XDRecError, ValueError):
    """A fusion weight fell outside [0, 1]."""
    error_code = 'FUSION_WEIGHT_OUT_OF_RANGE'


class ParseError(XDRecError, ValueError):
    """A data file line could not be parsed."""
    error_code = 'PARSE_ERROR'

    def __init__(self, message, line=None, **context):
        super().__init__(message, line=line, **context)
        self.line = line


class ReferentialError(XDRecError, ValueError):
    """An interaction references an item missing from the catalog."""
    error_code = 'REFERENTIAL_ERROR'

    def __init__(self, message, line=None, **context):
        super().__init__(message, line=line, **context)
        self.line = line


class DependencyError(XDRecError):
    """An upstream stage artifact is missing."""
    error_code = 'MISSING_UPSTREAM'

    def __init__(self, message, stage=None, **context):
        super().__init__(message, stage=stage, **context)
        self.stage = stage


class StaleArtifactError(XDRecError):
    """An on-disk artifact was produced under a different configuration."""
    error_code = 'STALE_ARTIFACT'

    def __init__(self, message, stage=None, **context):
        super().__init__(message, stage=stage, **context)
        self.stage = stage
