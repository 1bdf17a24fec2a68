"""Exception types shared across the package."""


class SceneCapError(Exception):
    """Base class for package-specific errors."""


class DimensionError(SceneCapError, ValueError):
    """Operand shapes are incompatible."""


class OptimizerError(SceneCapError):
    """Optimizer invariant violated (e.g. a parameter with no gradient)."""


class FormatError(SceneCapError):
    """A scene, checkpoint, or corpus file failed to parse or validate."""


class ConfigError(SceneCapError):
    """A configuration file or option is missing or invalid."""


class EncodingError(SceneCapError):
    """A token id falls outside the vocabulary."""


class DegenerateEmbeddingError(SceneCapError):
    """A projected embedding had zero norm and cannot be normalized."""


class JudgeProtocolError(SceneCapError):
    """The judge endpoint returned a malformed or invalid response."""


class NumericAbort(SceneCapError):
    """Training produced a non-finite loss and was aborted."""
