"""Exception types shared across the avatarkit modules."""


class AvatarError(Exception):
    """Base class for all avatarkit errors."""


class ContainerError(AvatarError):
    """Malformed array container (bad manifest, unreadable file)."""


class MissingArrayError(ContainerError):
    """A required array is absent from a container."""


class ShapeMismatchError(AvatarError):
    """An array does not have the shape declared or implied by its peers."""


class IndexRangeError(AvatarError):
    """A vertex/triangle/landmark index refers outside the vertex array."""


class DegenerateConfiguration(AvatarError):
    """Point set too degenerate (collinear or worse) for a similarity solve."""


class TooFewPoints(AvatarError):
    """Fewer correspondences than the solver needs."""


class SingularSystem(AvatarError):
    """Damped normal equations are not positive definite."""


class TooFewVisible(AvatarError):
    """Not enough visible vertices for the texture solve."""


class WindowError(AvatarError):
    """A sample window does not fit its canvas."""


class ConfigError(AvatarError):
    """Invalid or inconsistent configuration values."""


class DatasetError(AvatarError):
    """Dataset directory missing pieces or internally inconsistent."""
