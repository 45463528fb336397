"""Exception types raised across the package."""


class GrpEcmError(Exception):
    """Base class for all package errors."""


class ValidationError(GrpEcmError):
    """Input data or configuration failed validation."""


class StabilityViolation(GrpEcmError):
    pass


class DegenerateSpeed(GrpEcmError):
    pass


class InsufficientTimeSpan(ValidationError):
    pass


class SingularGram(GrpEcmError):
    pass


class NonpositiveVariance(GrpEcmError):
    pass


class ConvexityBreach(GrpEcmError):
    """A DCA step increased the objective; the convexity parameter is too small."""


class CertificateFailure(GrpEcmError):
    pass


class MaxIterExceeded(GrpEcmError):
    pass


class EmptyGroup(GrpEcmError):
    pass


class SingularSystem(GrpEcmError):
    pass


class ExplosivePath(GrpEcmError):
    pass


class LengthMismatch(ValidationError):
    pass


class SolverFailure(GrpEcmError):
    pass
