"""Exception hierarchy shared by all pbcell modules."""


class PBCellError(Exception):
    """Base class for every error raised by pbcell."""


class BadParameter(PBCellError, ValueError):
    pass


class Overflow(PBCellError, ArithmeticError):
    """An exponent z_j * x exceeded the hard cap."""


class AllSameSign(BadParameter):
    pass


class DuplicateValence(BadParameter):
    pass


class NonpositiveConcentration(BadParameter):
    pass


class NonNeutral(BadParameter):
    pass


class MeshDegenerate(PBCellError):
    pass


class ParseError(PBCellError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PBCellError):
    pass


class MeshMismatch(PBCellError):
    pass


class LinearSolveFailure(PBCellError):
    pass


class IncompatibleRHS(PBCellError):
    pass


class WrongSign(PBCellError):
    pass


class InsufficientPoints(PBCellError):
    pass


class TooFewNodesInLayer(PBCellError):
    pass


class NewtonStalled(PBCellError):
    """Newton hit its iteration cap; the last iterate and report are attached."""

    def __init__(self, message, field=None, report=None):
        super().__init__(message)
        self.field = field
        self.report = report


class ConfigError(PBCellError):
    pass
