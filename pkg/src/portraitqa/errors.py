"""Typed exceptions raised by the portraitqa pipeline."""


class PortraitQAError(Exception):
    """Base class for all portraitqa errors."""


# --- dataset ---------------------------------------------------------------

class MissingFile(PortraitQAError):
    pass


class MalformedRow(PortraitQAError):
    def __init__(self, row_no: int, reason: str):
        super().__init__(f"row {row_no}: {reason}")
        self.row_no = row_no
        self.reason = reason


class DuplicateImageRef(PortraitQAError):
    pass


class NoValidScene(PortraitQAError):
    pass


# --- numeric inputs --------------------------------------------------------

class NonFiniteInput(PortraitQAError):
    pass


class ProbabilityOutOfRange(PortraitQAError):
    pass


# --- preprocessing ---------------------------------------------------------

class EmptyImage(PortraitQAError):
    pass


class ImageTooSmall(PortraitQAError):
    pass


class NoFaceFound(PortraitQAError):
    pass


# --- model -----------------------------------------------------------------

class ShapeMismatch(PortraitQAError):
    pass


class DimMismatch(PortraitQAError):
    pass


class DimensionMismatch(DimMismatch):
    """Image and text embeddings disagree in dimension."""


class AllStreamsAbsent(PortraitQAError):
    pass


class NonFiniteActivation(PortraitQAError):
    pass


class NonFiniteOutput(PortraitQAError):
    pass


class ArchitectureMismatch(PortraitQAError):
    pass


class ChecksumMismatch(PortraitQAError):
    pass


# --- metrics ---------------------------------------------------------------

class LengthMismatch(PortraitQAError):
    pass


class DegenerateInput(PortraitQAError):
    """A metric is undefined on this input (constant vector, too few points)."""


class NoQualifyingScene(PortraitQAError):
    pass


# --- training --------------------------------------------------------------

class NonFiniteLoss(PortraitQAError):
    pass


class EpochOutOfRange(PortraitQAError):
    pass


class HashMismatch(PortraitQAError):
    pass


class VersionMismatch(PortraitQAError):
    pass


class ConfigError(PortraitQAError):
    """Configuration file is structurally invalid (unknown key, bad value)."""
