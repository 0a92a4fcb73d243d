"""Exceptions shared across the model modules."""


class DimensionMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


class SingularTransform(ValueError):
    pass


class ImageTooSmall(ValueError):
    pass


class NoObjects(ValueError):
    pass


class NonFinite(RuntimeError):
    """A loss term became NaN/Inf; training aborts with diagnostics."""


class EmptyRoI(ValueError):
    pass


class RoITooSmall(ValueError):
    pass


class TooFewSamples(ValueError):
    pass
