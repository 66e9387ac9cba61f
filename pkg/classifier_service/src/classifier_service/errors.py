"""Error taxonomy for training and serving."""


class ServiceError(Exception):
    """Base class for all classifier-service errors."""


class DegenerateLabels(ServiceError):
    """A classification task has fewer than two classes in its labels."""


class UnreadableImage(ServiceError):
    """An image file or byte payload cannot be decoded."""


class ArtifactLoadError(ServiceError):
    """A model artifact directory is missing, corrupt, or inconsistent."""
