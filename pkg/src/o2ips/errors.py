"""Exception hierarchy shared by every module."""


class IpsError(Exception):
    """Base class for all package errors."""


class ParseError(IpsError, ValueError):
    pass


class GeometryError(IpsError, ValueError):
    pass


class OutOfRange(IpsError, ValueError):
    pass


class DegenerateGeometry(IpsError, ValueError):
    pass


class NoDetectablePath(IpsError):
    """No channel tap clears the detection threshold (coverage hole)."""


class InsufficientData(IpsError, ValueError):
    pass


class TooFewAnchors(IpsError, ValueError):
    pass


class TooFewMeasurements(IpsError, ValueError):
    pass


class Underdetermined(IpsError, ValueError):
    pass


class RankDeficient(IpsError, ValueError):
    pass


class NonConvergence(IpsError):
    pass


class UnknownPanel(IpsError, KeyError):
    pass


class SingularFim(IpsError, ValueError):
    pass


class ProtocolViolation(IpsError):
    pass


class SessionFailed(IpsError):
    pass
