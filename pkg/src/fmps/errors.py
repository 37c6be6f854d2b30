"""Exception hierarchy shared across the package."""


class FMPSError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(FMPSError, ValueError):
    """A caller broke an operation's precondition."""


class ShapeError(ContractViolation):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        listed = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class TapeError(FMPSError, RuntimeError):
    """Gradient requested for something the tape never recorded."""


class DivergenceError(FMPSError, ArithmeticError):
    """A numerical loop produced NaN or Inf."""

    def __init__(self, step: int, what: str = "state"):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")
