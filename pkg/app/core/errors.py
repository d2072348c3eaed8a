"""
Error hierarchy for ringpet.
Every failure raised by a service maps to a process exit code through `exit_code`.
"""


class RingPetError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 1


class ConfigError(RingPetError):
    exit_code = 2


class BoundsError(RingPetError):
    pass


class ShapeError(RingPetError):
    pass


class DataError(RingPetError):
    pass


class DegenerateLorError(RingPetError):
    pass


class FormatError(RingPetError):
    pass


class ArtifactIOError(RingPetError):
    pass


class RegistryError(RingPetError):
    """The run registry database could not be created, read or written."""


class BaselineError(RingPetError):
    pass


class ReportError(RingPetError):
    pass


class NumericalError(RingPetError):
    exit_code = 3


class DegenerateModelError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class StageError(RingPetError):
    """A pipeline stage failed; carries the stage name and the original cause."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

    @property
    def exit_code(self) -> int:
        return getattr(self.cause, "exit_code", 1)
