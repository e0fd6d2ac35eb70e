"""Exception types raised across the package."""


class SJReuseError(Exception):
    pass


class DegenerateInput(SJReuseError, ValueError):
    pass


class ParseError(SJReuseError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(SJReuseError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class OutOfDomain(SJReuseError, ValueError):
    pass


class EmptySample(SJReuseError, ValueError):
    pass


class EmptyHistogram(SJReuseError, ValueError):
    pass


class DomainMismatch(SJReuseError, ValueError):
    pass


class NonFiniteLoss(SJReuseError, FloatingPointError):
    def __init__(self, batch_index: int, epoch: int | None = None):
        where = f"batch {batch_index}" if epoch is None else f"epoch {epoch}, batch {batch_index}"
        super().__init__(f"non-finite loss at {where}")
        self.batch_index = batch_index
        self.epoch = epoch


class ShapeMismatch(SJReuseError, ValueError):
    pass


class DuplicateId(SJReuseError, KeyError):
    pass


class EmptyRepository(SJReuseError, LookupError):
    pass


class CapacityError(SJReuseError, RuntimeError):
    def __init__(self, block_id: int, size: int, cap: int):
        super().__init__(f"block {block_id} holds {size} points, cap is {cap}")
        self.block_id = block_id
        self.size = size
        self.cap = cap


class PipelineError(SJReuseError, RuntimeError):
    """Failure inside an orchestration phase; ``phase`` names the step."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {cause}")
        self.phase = phase
        self.cause = cause
