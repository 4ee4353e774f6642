"""Exception types raised by dyntok."""


class DyntokError(Exception):
    """Base class for all library errors."""


class ShapeError(DyntokError, ValueError):
    pass


class GeometryError(DyntokError, ValueError):
    """Grid or stride geometry that cannot be realized."""


class NonFiniteError(DyntokError, FloatingPointError):
    pass


class ClusteringError(DyntokError, ValueError):
    pass


class FormatError(DyntokError, ValueError):
    """Malformed PPM, weight container, config or CSV input."""


class MissingWeightsError(DyntokError, ValueError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing weights: " + ", ".join(self.missing))
