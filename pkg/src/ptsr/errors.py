"""Exception hierarchy shared across the package."""


class PTSRError(Exception):
    """Base class for every error raised by this package."""


class DomainError(PTSRError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigError(PTSRError, ValueError):
    pass


class GraphError(PTSRError, ValueError):
    """Malformed expression graph (shape mismatch, foreign node, bad seed)."""


class VerificationError(PTSRError):
    pass


class ItemLookupError(PTSRError, KeyError):
    pass


class ScoringError(PTSRError, ValueError):
    pass


class DataError(PTSRError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class ProtocolError(PTSRError, ValueError):
    pass


class TrainingError(PTSRError, FloatingPointError):
    pass


class CheckpointError(PTSRError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass
