"""
Error Types Module
Exception hierarchy shared by every stage of the generation pipeline
"""


class CXRSynthError(Exception):
    """Base class for all pipeline errors"""

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_record(self):
        """Machine-readable error record used by the command line"""
        record = {
            'status': 'error',
            'error': str(self),
            'type': type(self).__name__
        }
        record.update(self.details)
        return record


class CodecError(CXRSynthError, ValueError):
    """Label map, palette or one-hot encoding problem"""


class ShapeError(CXRSynthError, ValueError):
    """Grids with incompatible dimensions"""


class ConfigError(CXRSynthError, ValueError):
    """Invalid configuration, manifest or empty input"""


class IngestionError(CXRSynthError, IOError):
    """Dataset directory does not follow the expected layout"""


class StateError(CXRSynthError, RuntimeError):
    """Illegal state transition or checkpoint mismatch"""


class TrainingDiverged(CXRSynthError, RuntimeError):
    """A training loss became NaN or infinite"""

    def __init__(self, message, step, **details):
        super().__init__(message, step=step, **details)
        self.step = step


class StageFailed(CXRSynthError, RuntimeError):
    """Wraps the error raised by a pipeline stage"""

    def __init__(self, stage, cause):
        super().__init__(f"Stage '{stage}' failed: {cause}", stage=stage)
        self.stage = stage
        self.cause = cause
