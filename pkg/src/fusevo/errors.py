"""Exception taxonomy for the odometry engine.

Everything raised on purpose derives from :class:`VOError` so callers can
catch engine failures without swallowing programming errors.
"""


class VOError(Exception):
    """Base class for all engine-level failures."""


class AngleNearPi(VOError):
    """Rotation logarithm requested within guard distance of the pi branch cut."""


class NonPositiveDepth(VOError):
    """A point's depth (or inverse depth) is not strictly positive."""


class BehindCamera(VOError):
    """Projection of a point with depth below the near-plane cutoff."""


class OutOfImage(VOError):
    """Bilinear sample or warp landed outside the valid image domain."""


class ImageTooSmall(VOError):
    """Pyramid construction would shrink a level below the minimum size."""


class SingularHessian(VOError):
    """Normal equations (or reduced camera system) are numerically singular."""


class TrackingLost(VOError):
    """Tracked support fell below the minimum point count."""


class EmptySystem(VOError):
    """No valid residual blocks of either type."""


class NoSurfaceInView(VOError):
    """A rendered view contains no scene surface."""


class MalformedDataset(VOError):
    """On-disk dataset violates the expected layout or metadata schema."""


class InsufficientOverlap(VOError):
    """Too few matched timestamps between trajectories to align them."""
