class ClogError(Exception):
    pass


class InvalidInputError(ClogError, ValueError):
    pass


class ConfigurationError(ClogError, ValueError):
    pass


class DataError(ClogError):
    pass


class IngestionError(DataError):
    pass


class DataAccessError(DataError):
    """Raised when a closed task's raw data is read."""


class EmptyBufferError(ClogError):
    pass


class DivergenceError(ClogError, FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class QualityError(ClogError):
    pass


class ReplayGenerationError(ClogError):
    pass


class InsufficientSamplesError(ClogError, ValueError):
    pass
