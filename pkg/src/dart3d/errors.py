"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class NumericError(FloatingPointError):
    """A loss or gradient became NaN/inf."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
