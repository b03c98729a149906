"""Exception hierarchy shared across the toolkit."""


class ResynthError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(ResynthError):
    """An argument violates a documented precondition."""


class SampleRateMismatch(InvalidInput):
    """Audio is not at the fixed 16 kHz pipeline rate."""


class ChannelMismatch(InvalidInput):
    """Audio is not mono."""


class ShapeMismatch(InvalidInput):
    """Array operands have incompatible shapes."""


class InvalidScene(InvalidInput):
    """Acoustic scene parameters are geometrically or physically impossible."""


class DegenerateInput(InvalidInput):
    """Input is silent or otherwise carries no usable signal."""


class InputTooShort(InvalidInput):
    """Signal is shorter than the minimum a metric can analyze."""


class InsufficientDecay(ResynthError):
    """Impulse response lacks the decay range needed for a T60 estimate."""


class EmptyCorpus(ResynthError):
    """No usable audio files were found."""


class BackendUnavailable(ResynthError):
    """A pluggable backend (SSL model, vocoder, codec) cannot be used."""


class InvalidToken(InvalidInput):
    """A code token is outside the codebook vocabulary."""


class CheckpointMismatch(ResynthError):
    """A checkpoint is incompatible with the requested pipeline or config."""


class AdapterError(ResynthError):
    """An external metric adapter crashed while scoring an utterance."""


class TrainingDiverged(ResynthError):
    """Training aborted on a non-finite loss; diagnostics were written."""

    def __init__(self, message: str, diagnostics_path: str | None = None):
        super().__init__(message)
        self.diagnostics_path = diagnostics_path
