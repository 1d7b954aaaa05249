"""Exception types shared across the codec."""


class CodecError(Exception):
    """Base class for all codec-specific failures."""


class AudioFormatError(CodecError):
    """Input audio does not satisfy the codec's format requirements."""


class ContainerFormatError(CodecError):
    """Bitstream container is malformed or violates a header invariant."""


class ModelMismatchError(ContainerFormatError):
    """Container was produced by a different model checkpoint."""

    def __init__(self, message: str = "model/bitstream mismatch"):
        super().__init__(message)


class TruncatedStreamError(ContainerFormatError):
    """Entropy-coded payload ended before all symbols were decoded."""


class TrainingDiverged(CodecError):
    """Loss became non-finite during optimization."""
