"""Exception hierarchy. Every error carries a short machine-readable code used by the CLI."""


class MvmimError(Exception):
    code = "E_GENERIC"


class DimensionError(MvmimError, ValueError):
    code = "E_DIM"


class DomainError(MvmimError, ValueError):
    code = "E_DOMAIN"


class GradientError(MvmimError, RuntimeError):
    code = "E_GRAD"


class ConfigError(MvmimError, ValueError):
    code = "E_CONFIG"


class InvalidSampleError(MvmimError, ValueError):
    code = "E_SAMPLE"


class EmptyDenominatorError(MvmimError, ValueError):
    code = "E_EMPTY"


class AlignmentError(MvmimError, ValueError):
    code = "E_ALIGN"


class GenerationError(MvmimError, RuntimeError):
    code = "E_GEN"


class FormatError(MvmimError, ValueError):
    code = "E_FORMAT"


class TrainingError(MvmimError, RuntimeError):
    code = "E_TRAIN"


class MissingFileError(MvmimError, FileNotFoundError):
    code = "E_IO"
