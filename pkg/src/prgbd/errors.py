"""Exception hierarchy shared by all modules."""


class PRGBDError(Exception):
    """Base class for every error raised by this package."""


class DegenerateDepth(PRGBDError, ValueError):
    pass


class BehindCamera(PRGBDError, ValueError):
    pass


class InvalidConfig(PRGBDError, ValueError):
    pass


class EmptyView(PRGBDError):
    pass


class NotFound(PRGBDError, KeyError):
    pass


class InvalidTriple(PRGBDError, ValueError):
    pass


class OutOfBounds(PRGBDError, ValueError):
    pass


class InitializationFailure(PRGBDError):
    pass


class DegenerateConfiguration(PRGBDError, ValueError):
    pass


class NoConvergence(PRGBDError):
    pass


class PreconditionError(PRGBDError, ValueError):
    pass


class EmptyEvaluation(PRGBDError, ValueError):
    pass


class AssociationError(PRGBDError, ValueError):
    pass


class LostTracking(PRGBDError):
    pass
