"""Exception hierarchy shared by all modules."""


class DiarkitError(Exception):
    """Base class for toolkit errors."""


class MalformedLine(DiarkitError, ValueError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: malformed{': ' + reason if reason else ''}")


class NonPositiveDuration(DiarkitError, ValueError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: duration must be positive")


class OffsetNotAfterOnset(DiarkitError, ValueError):
    def __init__(self, line_no: int):
        self.line_no = line_no
        super().__init__(f"line {line_no}: offset must be after onset")


class UnknownRecording(DiarkitError, KeyError):
    pass


class EmptyReferenceSpeech(DiarkitError, ValueError):
    pass


class EmptyUem(DiarkitError, ValueError):
    pass


class DimensionMismatch(DiarkitError, ValueError):
    pass


class ShapeMismatch(DiarkitError, ValueError):
    pass


class NonPositiveDefiniteWithin(DiarkitError, ValueError):
    pass


class NonSymmetricMatrix(DiarkitError, ValueError):
    pass


class EmptyInput(DiarkitError, ValueError):
    pass


class EmptyStream(DiarkitError, ValueError):
    pass


class LengthMismatch(DiarkitError, ValueError):
    pass


class StepMismatch(DiarkitError, ValueError):
    pass


class TooFewSystems(DiarkitError, ValueError):
    pass


class UnnormalizedWeights(DiarkitError, ValueError):
    pass


class EmptyPredictions(DiarkitError, ValueError):
    pass


class UnknownDomain(DiarkitError, KeyError):
    pass


class NoSpeechForRecording(DiarkitError, ValueError):
    pass


class AllSpeechOverlapped(DiarkitError, ValueError):
    pass


class TooFewSpeakers(DiarkitError, ValueError):
    pass


class EmptyPrior(DiarkitError, ValueError):
    pass


class EmptyProfiles(DiarkitError, ValueError):
    pass


class SeparatorFailure(DiarkitError, RuntimeError):
    pass


class EstimatorFailure(DiarkitError, RuntimeError):
    pass


class DegeneratePrior(DiarkitError, ValueError):
    pass


class UncoveredRecording(DiarkitError, KeyError):
    pass


class InfeasibleOverlap(DiarkitError, ValueError):
    pass


class ConfigInvalid(DiarkitError, ValueError):
    def __init__(self, key_path: str, reason: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {reason}")
