"""Exception hierarchy shared by all qshed modules."""


class QShedError(Exception):
    pass


class InvalidInput(QShedError, ValueError):
    pass


class NumericalFailure(QShedError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ProtocolError(QShedError):
    pass


class ConsistencyError(QShedError):
    pass


class Infeasible(QShedError):
    pass


class DegenerateCoefficient(QShedError, ValueError):
    pass


class Unsupported(QShedError):
    pass
