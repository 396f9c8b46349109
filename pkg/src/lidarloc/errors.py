"""Exception hierarchy. Everything derives from ``LidarLocError``."""


class LidarLocError(Exception):
    pass


class InvalidParameterError(LidarLocError, ValueError):
    pass


class InvalidInputError(LidarLocError, ValueError):
    pass


class InsufficientDataError(LidarLocError, ValueError):
    pass


class DegenerateGeometryError(LidarLocError, ValueError):
    pass


class NoOverlapError(LidarLocError):
    pass


class OutOfWindowError(LidarLocError, IndexError):
    pass


class UnderConstrainedError(LidarLocError):
    """Too few valid correspondences to pin down a 6-DoF motion."""


class InvalidStateError(LidarLocError):
    pass


class DegenerateSegmentError(LidarLocError, ValueError):
    pass


class EmptyMapError(LidarLocError):
    pass


class ParseError(LidarLocError, ValueError):
    pass


class AlignmentError(LidarLocError, KeyError):
    """A trajectory timestamp has no counterpart in the ground truth."""

    def __str__(self):
        return Exception.__str__(self)


class ConfigError(LidarLocError, ValueError):
    pass
