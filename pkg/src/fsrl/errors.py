class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class FrozenParameterError(RuntimeError):
    """A parameter that must stay frozen was modified."""
