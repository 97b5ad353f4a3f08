class BodyliftError(Exception):
    pass


class DegenerateRotation(BodyliftError, ValueError):
    pass


class NotARotation(BodyliftError, ValueError):
    pass


class ShapeMismatch(BodyliftError, ValueError):
    pass


class StaleCache(BodyliftError, ValueError):
    pass


class LayoutMismatch(BodyliftError, ValueError):
    pass


class DegenerateConfiguration(BodyliftError, ValueError):
    pass


class ZeroHandSize(BodyliftError, ValueError):
    pass


class DegenerateAxis(BodyliftError, ValueError):
    pass


class BehindCamera(BodyliftError, ValueError):
    pass


class InsufficientObservations(BodyliftError, ValueError):
    pass


class EmptyConstraints(BodyliftError, ValueError):
    pass


class DivergedError(BodyliftError, ArithmeticError):
    pass


class FormatError(BodyliftError, ValueError):
    """Malformed or incompatible file contents."""
