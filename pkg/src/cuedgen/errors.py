"""Exception types shared across the pipeline."""


class CuedgenError(Exception):
    """Base class for all package errors."""


class UnknownToken(CuedgenError):
    """A pinyin token is not in the syllable grammar."""

    def __init__(self, token, position):
        super().__init__(f"unknown pinyin token {token!r} at position {position}")
        self.token = token
        self.position = position


class UnmappedPhoneme(CuedgenError):
    """A phoneme has no group assignment in the mapping table."""

    def __init__(self, phoneme, kind):
        super().__init__(f"{kind} phoneme {phoneme!r} is not in the mapping table")
        self.phoneme = phoneme
        self.kind = kind


class TableError(CuedgenError):
    """A mapping table file fails validation."""


class EndpointUnavailable(CuedgenError):
    """A configured external service could not be reached."""


class MalformedResponse(CuedgenError):
    """An external service returned a response that fails its schema check."""


class FormatError(CuedgenError):
    """A motion or segment file does not conform to the documented format."""


class EmptySet(CuedgenError):
    """An aggregate over motion sequences received no sequences."""


class ShapeMismatch(CuedgenError):
    """Two arrays that must share a shape do not."""


class InvalidTemperature(CuedgenError):
    """Softmax temperature must be strictly positive."""


class DivergenceDetected(CuedgenError):
    """A training loss became non-finite."""


class StepOutOfRange(CuedgenError):
    """A diffusion step index is outside [1, N]."""


class ScheduleError(CuedgenError):
    """A diffusion noise schedule violates its invariants."""


class NonFiniteState(CuedgenError):
    """The sampler produced a non-finite latent state."""

    def __init__(self, step):
        super().__init__(f"non-finite latent state at reverse step {step}")
        self.step = step


class BackendUnavailable(CuedgenError):
    """The requested audio feature backend cannot be used."""


class TooShort(CuedgenError):
    """A sequence is too short for the requested computation."""


class CountMismatch(CuedgenError):
    """Two segment annotations have different segment counts."""


class ZeroVector(CuedgenError):
    """A cosine was requested against a zero-norm vector."""


class TooFewItems(CuedgenError):
    """A dataset split needs more items than were provided."""


class MissingCheckpoint(CuedgenError):
    """A pipeline stage requires a checkpoint that is absent."""
