"""Exception and warning types.

Everything raised on bad input derives from :class:`ValidationError`; the CLI
maps those to exit code 1 and every other failure to exit code 2.
"""


class DcvRoodError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DcvRoodError, ValueError):
    """Input violates a documented precondition."""


# taxonomy / data model
class ManifestParseError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class OrphanClass(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class UnknownClass(ValidationError):
    pass


# splitting
class InvalidK(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class TooFewGroups(ValidationError):
    pass


class ClassOverlap(ValidationError):
    pass


class NoStrataLevel(ValidationError):
    pass


class TaxonomyMismatch(ValidationError):
    pass


class KMismatch(ValidationError):
    pass


class SampleOverlap(ValidationError):
    pass


# detectors
class InvalidGamma(ValidationError):
    pass


class InvalidTopM(ValidationError):
    pass


class KTooLarge(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class ClassTooSmall(ValidationError):
    pass


class MissingSample(ValidationError):
    pass


class ExtraSample(ValidationError):
    pass


class SingularCovariance(DcvRoodError):
    pass


# metrics / stats
class EmptyClass(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class ConstantInput(ValidationError):
    pass


class TiesInExactMode(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


# harness
class ConfigError(ValidationError):
    pass


class DetectorMismatch(ValidationError):
    pass


class DcvRoodWarning(UserWarning):
    """Non-fatal condition worth recording in the run's warnings log."""


class SmallClassWarning(DcvRoodWarning):
    pass


class StratumUnderfilled(DcvRoodWarning):
    pass


class EmptyOODStratum(DcvRoodWarning):
    pass


class ConvergenceWarning(DcvRoodWarning):
    pass
