"""Exception types raised across the package."""


class FERFormerError(Exception):
    pass


class ShapeError(FERFormerError, ValueError):
    pass


class ConfigError(FERFormerError, ValueError):
    pass


class InputError(FERFormerError, ValueError):
    pass


class VocabularyError(FERFormerError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class GraphError(FERFormerError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, double backward)."""


class DeterminismError(FERFormerError, RuntimeError):
    pass


class IngestionError(FERFormerError, RuntimeError):
    pass


class TrainingError(FERFormerError, RuntimeError):
    pass


class CheckpointError(FERFormerError, RuntimeError):
    pass


class EvaluationError(FERFormerError, RuntimeError):
    pass
