"""Exception types shared across the package."""


class NormvoxError(Exception):
    """Base class for all errors raised by this package."""


class MalformedFrame(NormvoxError, ValueError):
    """Raw frame bytes do not form whole (x, y, z, r) float32 records."""


class NonFiniteValue(NormvoxError, ValueError):
    """A point cloud contains NaN or Inf coordinates."""


class NonFiniteInput(NormvoxError, ValueError):
    """A numeric input (query point, feature matrix) contains NaN or Inf."""


class PointOutOfRange(NormvoxError, ValueError):
    """A point handed to the voxelizer lies outside the configured range."""

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"point {index} lies outside the voxel range")


class EmptyInput(NormvoxError, ValueError):
    """An operation that needs at least one element received none."""


class InsufficientNeighbors(NormvoxError, ValueError):
    """A k-nearest-neighbor query asked for more neighbors than exist."""

    def __init__(self, k: int, available: int):
        self.k = k
        self.available = available
        super().__init__(f"requested k={k} neighbors but only {available} are available")


class DegenerateNeighborhood(NormvoxError, ValueError):
    """All neighborhood points coincide; the covariance carries no direction."""


class DimensionMismatch(NormvoxError, ValueError):
    """Array shapes are incompatible with the configured layer widths."""


class LengthMismatch(NormvoxError, ValueError):
    """Sequences that must align element-wise have different lengths."""
