"""Exception hierarchy shared by every stage of the benchmark."""


class FitBenchError(Exception):
    """Base class for all errors raised by fitbench."""


class ConfigurationError(FitBenchError, ValueError):
    """Invalid parameters, descriptors or run configuration."""


class InputError(FitBenchError, ValueError):
    """An input vector or table does not match the expected shape."""


class TrainingError(FitBenchError, RuntimeError):
    """A model failed to reach its accuracy floor."""

    def __init__(self, model_id: str, accuracy: float, floor: float):
        self.model_id = model_id
        self.accuracy = accuracy
        self.floor = floor
        super().__init__(
            f"model {model_id!r} reached eval accuracy {accuracy:.3f} < floor {floor:.3f}"
        )


class DegenerateDirectionError(FitBenchError, ValueError):
    """A raw perturbation is zero or non-finite and cannot be normalized."""


class PreconditionError(FitBenchError, ValueError):
    """An attack or search was asked to start from a misclassified sample."""


class NumericError(FitBenchError, ArithmeticError):
    """A gradient or score became non-finite."""


class ReferenceOrderingError(FitBenchError, ValueError):
    """White-box references do not dominate black-box references in area."""


class IncompleteTableError(FitBenchError, KeyError):
    """Rows required for a computation are missing from a distortion table."""

    def __init__(self, gaps):
        self.gaps = list(gaps)
        preview = ", ".join(map(str, self.gaps[:5]))
        more = "" if len(self.gaps) <= 5 else f" (+{len(self.gaps) - 5} more)"
        super().__init__(f"missing {len(self.gaps)} rows: {preview}{more}")

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return self.args[0]


class StageError(FitBenchError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
