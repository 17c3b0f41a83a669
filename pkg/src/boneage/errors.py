"""Exception types shared across the package."""


class BoneAgeError(Exception):
    """Base class for every error raised by this package."""


class ManifestError(BoneAgeError, ValueError):
    pass


class MalformedRow(ManifestError):
    def __init__(self, line, reason):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class MissingImage(ManifestError):
    def __init__(self, sample_id, path):
        self.sample_id = sample_id
        self.path = path
        super().__init__(f"missing image for id {sample_id!r}: {path}")


class DuplicateId(ManifestError):
    def __init__(self, sample_id, line=None):
        self.sample_id = sample_id
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate id {sample_id!r}{where}")


class InsufficientSamples(BoneAgeError, ValueError):
    pass


class EmptyImage(BoneAgeError, ValueError):
    pass


class ImageLoadError(BoneAgeError, OSError):
    def __init__(self, sample_id, path, cause=None):
        self.sample_id = sample_id
        self.path = path
        super().__init__(f"cannot load image for id {sample_id!r} from {path}: {cause}")


class UnknownBackbone(BoneAgeError, KeyError):
    def __str__(self):
        return f"unknown backbone {self.args[0]!r}"


class WeightsUnavailable(BoneAgeError, RuntimeError):
    pass


class ShapeMismatch(BoneAgeError, ValueError):
    pass


class CheckpointMismatch(BoneAgeError, ValueError):
    pass


class LengthMismatch(BoneAgeError, ValueError):
    pass


class EmptyBatch(BoneAgeError, ValueError):
    pass


class NonFiniteLoss(BoneAgeError, FloatingPointError):
    """Training diverged; ``history`` holds the epochs completed so far."""

    def __init__(self, message, history=None):
        self.history = history
        super().__init__(message)


class DuplicateCell(BoneAgeError, ValueError):
    def __init__(self, backbone_id, regime):
        self.backbone_id = backbone_id
        self.regime = regime
        super().__init__(f"duplicate result for ({backbone_id}, {regime})")


class PayloadMismatch(BoneAgeError, TypeError):
    pass
