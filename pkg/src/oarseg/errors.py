"""Exception types shared across the pipeline."""


class OarsegError(Exception):
    """Base class for all pipeline errors."""


class ParseError(OarsegError):
    """Malformed volume or config file. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GeometryInvalid(OarsegError):
    """Volume geometry violates an invariant (e.g. non-orthonormal direction)."""


class LabelOutOfRange(OarsegError):
    """Label volume contains an id outside the allowed range."""


class DimsTooSmall(OarsegError):
    """Volume too small for the requested interpolator."""


class GridMismatch(OarsegError):
    """Volumes expected on an identical grid differ in geometry."""


class EmptyBody(OarsegError):
    """No voxel above the body threshold."""


class NoLabels(OarsegError):
    """No labeled voxel in the dataset."""


class NoVoxelsInRange(OarsegError):
    """Window statistics requested over an empty voxel set."""


class TooFewSamples(OarsegError):
    """Mutual information estimate has too few valid sample points."""


class NonFiniteObjective(OarsegError):
    """Optimizer objective returned NaN or infinity."""


class InfeasibleBounds(OarsegError):
    """Lower bound exceeds upper bound."""


class RegistrationFailed(OarsegError):
    """Both affine registration attempts raised."""


class ShapeError(OarsegError):
    """Tensor shape incompatible with the network."""


class TargetOutOfRange(OarsegError):
    """Segmentation target contains a class id the loss cannot handle."""


class DegenerateInput(OarsegError):
    """Input carries no usable variation (e.g. all points identical)."""


class NoModality(OarsegError):
    """Prediction requested with neither CT nor MRI."""


class SpecInvalid(OarsegError):
    """Phantom specification is internally inconsistent."""


class EmptyMask(OarsegError):
    """Surface-distance metric on an empty mask."""


class ConfigError(OarsegError):
    """Run configuration file is invalid."""
