"""Exception taxonomy shared by all pcs modules."""


class PcsError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PcsError):
    """Tensor shapes or dtypes are inconsistent with the operation."""


class GeometryError(PcsError):
    """Spatial sizes do not satisfy an exact-divisibility requirement."""


class ContractError(PcsError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ConfigError(PcsError):
    """Invalid or inconsistent configuration value."""


class FormatError(PcsError):
    """Malformed file content. ``offset`` is the byte position when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(PcsError):
    """Dataset-level problem, e.g. a directory with no usable images."""


class DivergenceError(PcsError):
    """Training produced a non-finite loss. ``iteration`` is the failing step."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
