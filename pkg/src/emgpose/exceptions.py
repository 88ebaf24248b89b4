class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class FormatError(ValueError):
    """A binary or text container could not be parsed.

    Attributes
    ----------
    section : str
        Name of the section that was being read.
    offset : int or None
        Byte offset (binary files) or line number (text files) of the failure.
    """

    def __init__(self, message, section=None, offset=None):
        super().__init__(message)
        self.section = section
        self.offset = offset


class SafetyInvariantError(RuntimeError):
    """A pose that must be collision-free was not; state is corrupted."""


class TrainingError(RuntimeError):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class StateError(RuntimeError):
    """Operation called on an object in the wrong lifecycle state."""
