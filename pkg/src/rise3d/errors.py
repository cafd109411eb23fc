"""Exception taxonomy shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class DegenerateGeometryError(ContractError):
    """Two atoms closer than the duplicate-point threshold."""


class ParseError(ValueError):
    """Malformed XYZ input; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GenerationError(RuntimeError):
    """Synthetic geometry placement failed after the retry budget."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during a numeric computation."""


class TrainingFailureError(NumericError):
    """Backbone training diverged; carries the offending step index."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class OptimizationFailureError(NumericError):
    """An explainer optimization diverged; carries the offending epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class EmptyBinWarning(UserWarning):
    """An annulus bin selected for masking contains no edges."""
