"""Exception types shared across the package."""


class VentAllocError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VentAllocError, ValueError):
    pass


class ParseError(VentAllocError, ValueError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyInputError(VentAllocError, ValueError):
    pass


class ShapeError(VentAllocError, ValueError):
    pass


class ContractError(VentAllocError, RuntimeError):
    pass


class NumericError(VentAllocError, ArithmeticError):
    pass


class CapabilityError(VentAllocError, RuntimeError):
    pass


class EvaluationError(VentAllocError, ValueError):
    pass
