"""Exception hierarchy shared by all gazelab modules."""


class GazelabError(Exception):
    """Base class for every error raised by gazelab."""


class SchemaError(GazelabError, ValueError):
    """A required column is missing from an input file."""

    def __init__(self, column, path=None):
        self.column = column
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing column {column!r}{where}")


class ParseError(GazelabError, ValueError):
    """A data row could not be parsed. ``row`` is 1-based, header excluded."""

    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class EmptyInputError(GazelabError, ValueError):
    pass


class StructureError(GazelabError, ValueError):
    """Input violates a structural invariant (alternation, contiguity, grid)."""


class DomainError(GazelabError, ValueError):
    """A parameter lies outside its admissible range."""


class SingularityError(GazelabError, ArithmeticError):
    pass


class SeparationError(GazelabError, ArithmeticError):
    """Logistic coefficients diverge because the response is perfectly predicted."""


class DivergenceError(GazelabError, ArithmeticError):
    """Cox partial likelihood is monotone; a coefficient runs off to infinity."""


class ConvergenceError(GazelabError, RuntimeError):
    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class DegreesOfFreedomError(GazelabError, ValueError):
    pass


class StratumError(GazelabError, ValueError):
    pass
