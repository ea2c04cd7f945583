"""Exception hierarchy shared across the package."""


class DigitEnsembleError(Exception):
    """Base class for every error raised by this package."""


# audio ingestion
class MalformedContainer(DigitEnsembleError):
    pass


class UnsupportedEncoding(DigitEnsembleError):
    pass


class EmptyDataset(DigitEnsembleError):
    pass


class UnlabeledFile(DigitEnsembleError):
    pass


class ClassTooSmall(DigitEnsembleError):
    pass


# feature extraction
class DomainError(DigitEnsembleError, ValueError):
    pass


class SignalTooShort(DigitEnsembleError):
    pass


class BadFrameLength(DigitEnsembleError):
    pass


class ConfigError(DigitEnsembleError, ValueError):
    pass


class CorruptFeatureMap(DigitEnsembleError):
    pass


# network
class ShapeMismatch(DigitEnsembleError, ValueError):
    pass


class NonFiniteGradient(DigitEnsembleError, FloatingPointError):
    pass


class CorruptCheckpoint(DigitEnsembleError):
    pass


# ensembling / metrics
class EmptyEnsemble(DigitEnsembleError, ValueError):
    pass


class LengthMismatch(DigitEnsembleError, ValueError):
    pass


class EmptyInput(DigitEnsembleError, ValueError):
    pass


class FeatureKindMismatch(DigitEnsembleError):
    pass
