"""
Error types shared by the library and the command line
"""


class SBRCNNError(Exception):
    """Base error; ``exit_code`` is what the CLI returns for it"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(SBRCNNError):
    """Experiment configuration failed validation"""


class ManifestError(SBRCNNError):
    """Annotation file does not follow the dataset schema"""


class CheckpointError(SBRCNNError):
    """Checkpoint archive is missing, corrupt or from another version"""


class InvalidInputError(SBRCNNError, ValueError):
    """A numeric precondition of an operation was violated"""
