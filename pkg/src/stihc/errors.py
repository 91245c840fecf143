"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for bad input, 3 for numerical failure, 4 for an internal limit.
"""


class StihcError(Exception):
    exit_code = 1


class InputError(StihcError):
    exit_code = 2


class NumericalError(StihcError):
    exit_code = 3


class LimitError(StihcError):
    exit_code = 4


class StihcWarning(UserWarning):
    pass


# input errors
class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class UnknownSpot(InputError):
    pass


class EmptyAfterFilter(InputError):
    pass


class DuplicatePoint(InputError):
    pass


class CollinearInput(InputError):
    pass


class NegativeValue(InputError):
    pass


class NonFiniteResponse(InputError):
    pass


class InvalidResponse(InputError):
    pass


class LengthMismatch(InputError):
    pass


class TooFewSpots(InputError):
    pass


class SingleCluster(InputError):
    pass


# numerical errors
class DegenerateTriangle(NumericalError):
    pass


class SingularMass(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class SaturatedFit(NumericalError):
    pass


class IdenticalCentroids(NumericalError):
    pass


class GeneFitError(NumericalError):
    """A per-gene failure with the gene identity attached."""

    def __init__(self, gene, cause):
        self.gene = gene
        self.cause = cause
        super().__init__(f"gene {gene!r}: {cause}")


# limits
class IterationLimit(LimitError):
    pass
