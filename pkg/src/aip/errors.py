"""Exception hierarchy shared by every stage of the workbench."""


class AIPError(Exception):
    """Base class for all workbench errors."""


class DimensionError(AIPError, ValueError):
    pass


class DomainError(AIPError, ValueError):
    pass


class OptimizationError(AIPError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(AIPError, ValueError):
    pass


class SplitError(AIPError, ValueError):
    def __init__(self, message, user=None):
        super().__init__(message)
        self.user = user


class SelectionError(AIPError, ValueError):
    pass


class SamplingError(AIPError, ValueError):
    pass


class TrainingError(AIPError, ArithmeticError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ScoringError(AIPError, ValueError):
    pass


class AttackError(AIPError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class LayoutError(AIPError, ValueError):
    pass


class CodecError(AIPError, RuntimeError):
    pass


class EvaluationError(AIPError, ValueError):
    def __init__(self, message, user=None):
        super().__init__(message)
        self.user = user


class StatisticsError(AIPError, ValueError):
    pass


class ValidationError(AIPError, ValueError):
    def __init__(self, errors):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class StageError(AIPError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
