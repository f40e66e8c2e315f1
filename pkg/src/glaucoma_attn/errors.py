class GlaucomaAttnError(Exception):
    """Base class for package errors."""


class ConfigurationError(GlaucomaAttnError, ValueError):
    pass


class ValidationError(GlaucomaAttnError, ValueError):
    pass


class PretrainedWeightsError(GlaucomaAttnError, FileNotFoundError):
    pass


class IngestError(GlaucomaAttnError):
    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


class CheckpointError(GlaucomaAttnError):
    pass


class TrainingDivergedError(GlaucomaAttnError, RuntimeError):
    pass
