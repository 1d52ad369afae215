"""
rccformer.core.errors - Exception hierarchy shared by every rccformer module

Library code raises these; only the command-line layer catches them and turns
them into a status line and a nonzero exit code.
"""

from typing import Optional, Sequence


class RCCError(Exception):
    """Base class for all rccformer errors"""


class ShapeError(RCCError, ValueError):
    """Operand shapes are incompatible for the requested operation"""

    def __init__(self, message: str, *shapes: Sequence[int]):
        if shapes:
            message = f"{message} (shapes: {', '.join(str(tuple(s)) for s in shapes)})"
        super().__init__(message)
        self.shapes = [tuple(s) for s in shapes]


class DomainError(RCCError, ValueError):
    """Input lies outside the mathematical domain of the operation"""


class NonFiniteError(RCCError, FloatingPointError):
    """A NaN or infinity was encountered"""

    def __init__(self, message: str, index: Optional[tuple] = None):
        if index is not None:
            message = f"{message} at index {index}"
        super().__init__(message)
        self.index = index


class ConfigError(RCCError, ValueError):
    """Invalid hyperparameter, mode name or configuration key"""


class AnnotationError(RCCError, ValueError):
    """Malformed or out-of-bounds dot annotation"""


class SceneError(RCCError, ValueError):
    """A synthetic scene cannot be generated as requested"""


class CheckpointError(RCCError, IOError):
    """Checkpoint container is unreadable or has the wrong magic/version"""


class ConfigMismatchError(RCCError, ValueError):
    """Checkpoint configuration is incompatible with the data it is applied to"""


class TrainingDivergedError(RCCError, ArithmeticError):
    """Training produced a non-finite loss"""


class DatasetError(RCCError, IOError):
    """Dataset directory, image or manifest is missing or unreadable"""
