"""Exception taxonomy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, BackendError (and
subclasses) -> 3, MissingArtifactError -> 4.
"""


class FeatureProbeError(Exception):
    """Base class for all package errors."""


class ValidationError(FeatureProbeError):
    """A value violates a documented precondition or invariant."""


class TopologyError(ValidationError):
    """A style state does not match the generator's declared topology."""


class DecodeError(FeatureProbeError):
    """A serialized payload is corrupt or truncated."""


class BackendError(FeatureProbeError):
    """A generator / SUT / judgment backend failed."""

    def __init__(self, message, code="BACKEND_ERROR"):
        super().__init__(message)
        self.code = code


class NotDifferentiableError(BackendError):
    """The backend cannot provide gradients; callers fall back to FDA."""

    def __init__(self, message="backend does not support gradients"):
        super().__init__(message, code="NOT_DIFFERENTIABLE")


class UnsupportedOperationError(BackendError):
    """The backend does not implement an optional capability."""

    def __init__(self, message):
        super().__init__(message, code="UNSUPPORTED")


class ConfigError(FeatureProbeError):
    """Pipeline configuration is invalid."""


class MissingArtifactError(FeatureProbeError):
    """A pipeline stage requires an artifact a previous stage did not write."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ScenarioError(FeatureProbeError):
    """Synthetic scenario construction failed (e.g. toy SUT did not converge)."""
