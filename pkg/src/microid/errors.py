"""Exception hierarchy shared by every stage of the laboratory."""


class MicroIdError(Exception):
    """Base class for all errors raised by :mod:`microid`."""


class DomainMargin(MicroIdError):
    """A perturbed point or integration segment left the grid box."""


class UnsupportedVariant(MicroIdError):
    pass


class BadRho(MicroIdError):
    pass


class OutsideImage(MicroIdError):
    """Share vector cannot be produced by the demand system."""


class NotInImage(MicroIdError):
    """Target share vector is outside the numerical image of a surface."""


class NonUnique(MicroIdError):
    """Two distinct consumer-observable points produce the same shares."""


class NoTies(MicroIdError):
    """No two markets in the cell share a lattice price vector."""


class SingularJacobian(MicroIdError):
    pass


class DisconnectedCover(MicroIdError):
    """The anchor component of the pair graph misses too much of the grid."""


class RankDeficient(MicroIdError):
    """First-stage design lacks rank (in-sample completeness failure)."""


class NoSupport(MicroIdError):
    pass


class ExogeneityNotAsserted(MicroIdError):
    pass


class DegenerateMarkets(MicroIdError):
    pass


class WeakInstrument(MicroIdError):
    pass


class OverlappingSets(MicroIdError):
    pass


class MissingRole(MicroIdError):
    pass


class SeriesTooShort(MicroIdError):
    pass


class ConfigInvalid(MicroIdError):
    pass


class ParseError(MicroIdError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StageError(MicroIdError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
