"""Exception hierarchy shared across the package."""


class MCALabError(Exception):
    pass


class InvalidShapeError(MCALabError, ValueError):
    pass


class DegenerateInputError(MCALabError, ValueError):
    pass


class DegeneratePrototypeError(DegenerateInputError):
    pass


class DegenerateProjectionError(DegenerateInputError):
    pass


class ContractError(MCALabError, ValueError):
    pass


class InvalidConfigError(MCALabError, ValueError):
    pass


class InvalidInputError(MCALabError, ValueError):
    pass


class FormatError(MCALabError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class IncompatibleCheckpointError(MCALabError):
    pass


class TrainingDivergenceError(MCALabError, FloatingPointError):
    pass
