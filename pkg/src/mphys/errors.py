"""Exception types shared across the package."""


class MphysError(Exception):
    """Base class for all package-specific errors."""


class MissingField(MphysError):
    """A parameter required by the material class is absent."""


class ExtraField(MphysError):
    """A parameter not belonging to the material class is present."""


class DegenerateMaterial(MphysError):
    """Material coefficients outside the physically meaningful region."""


class NonFinite(MphysError):
    """NaN or Inf encountered where finite values are required."""


class SingularF(MphysError):
    """Deformation gradient too close to singular for stress evaluation."""


class ParticleOutOfDomain(MphysError):
    """A particle reached the padded boundary region of the grid."""


class Unstable(MphysError):
    """CFL guard tripped; carries frame/substep context."""

    def __init__(self, message, frame=None, substep=None):
        super().__init__(message)
        self.frame = frame
        self.substep = substep


class ParseError(MphysError):
    """Malformed input document; message carries the location."""


class ValidationError(MphysError):
    """Structurally valid input violating a documented invariant."""


class DimensionMismatch(MphysError):
    """Array shapes incompatible with the requested operation."""


class NoJsonFound(MphysError):
    """No JSON object could be extracted from a backend response."""


class UnknownMaterialType(MphysError):
    """material_type string does not name one of the seven classes."""


class BackendUnavailable(MphysError):
    """LLM backend not reachable or not configured."""


class InitFailed(MphysError):
    """Initialization failed after the single retry."""
