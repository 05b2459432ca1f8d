"""Exception types shared across the package."""


class DiaryGanError(Exception):
    """Base class for all package errors."""


class DimensionError(DiaryGanError, ValueError):
    pass


class ParameterError(DiaryGanError, ValueError):
    pass


class ContractError(DiaryGanError, RuntimeError):
    pass


class TapeReuseError(ContractError):
    pass


class SchemaError(DiaryGanError, ValueError):
    pass


class CapacityError(DiaryGanError, ValueError):
    pass


class StructuralError(DiaryGanError, ValueError):
    """Histograms with different bin layouts were compared."""


class CombinatorialBlowupError(DiaryGanError, ValueError):
    pass


class IntegrityError(DiaryGanError, IOError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(DiaryGanError, IOError):
    pass


class TrainingDivergedError(DiaryGanError, FloatingPointError):
    def __init__(self, step, what="loss"):
        super().__init__(f"non-finite {what} at training step {step}; training aborted")
        self.step = step
