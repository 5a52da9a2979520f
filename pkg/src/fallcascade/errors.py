"""Exception hierarchy shared by every stage of the pipeline."""


class FallCascadeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FallCascadeError):
    """Invalid architecture, hyperparameter or split configuration."""


class DataError(FallCascadeError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ModelLoadError(DataError):
    """A model file could not be decoded; the message names the bad field."""


class TrainingError(FallCascadeError):
    """Optimisation failed (non-finite gradients, degenerate labels...)."""


class PipelineError(FallCascadeError):
    """Error raised by a pipeline stage, tagged with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
