"""Exception hierarchy shared by every pass."""

from __future__ import annotations


class TraincError(Exception):
    """Base class for all compiler errors."""


class ParseError(TraincError):
    def __init__(self, message: str, line: int = 0, col: int = 0) -> None:
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col
        self.reason = message


class TypeInferenceError(TraincError):
    """Raised by infer_types; subclasses narrow the cause."""


class ShapeMismatch(TypeInferenceError):
    pass


class DTypeMismatch(TypeInferenceError):
    pass


class UnknownOp(TypeInferenceError):
    pass


class DuplicateRegistration(TraincError):
    pass


class UnimplementedOp(TraincError):
    def __init__(self, op: str, detail: str = "") -> None:
        msg = f"no enabled dialect implements {op!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op


class NonDifferentiable(TraincError):
    def __init__(self, op: str) -> None:
        super().__init__(f"operator {op!r} has no registered adjoint")
        self.op = op


class CycleError(TraincError):
    pass


class BudgetInfeasible(TraincError):
    def __init__(self, budget: int, floor: int, reason: str = "") -> None:
        msg = f"memory budget {budget} B is infeasible (floor {floor} B)"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.budget = budget
        self.floor = floor


class PipelineOrderError(TraincError):
    pass


class ProtocolError(TraincError):
    def __init__(self, message: str, step: int | None = None, rank: int | None = None) -> None:
        super().__init__(f"collective protocol error at step {step}, rank {rank}: {message}")
        self.step = step
        self.rank = rank
