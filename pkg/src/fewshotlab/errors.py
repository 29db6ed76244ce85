"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError -> 2, IncompatibleTasks / IncompatibleScheme -> 3,
every other FewShotError -> 4.
"""


class FewShotError(Exception):
    """Base class for all package errors."""


class ConfigError(FewShotError):
    """Malformed or inconsistent configuration / usage."""


# --- data ---------------------------------------------------------------

class EmptyPartition(FewShotError):
    """A partition (or a class inside it) has too few images to split."""


class InsufficientData(FewShotError):
    """A class lacks enough images for the requested episode shape."""


class DecodeError(FewShotError):
    """An image file could not be decoded."""


# --- backbones ----------------------------------------------------------

class UnsupportedArch(FewShotError):
    """Unknown backbone architecture name."""


class ShapeMismatch(FewShotError):
    """Array shape incompatible with the model or head."""


# --- pretext ------------------------------------------------------------

class NonSquareInput(FewShotError):
    """Rotation transform requires a square image."""


class OddDimensions(FewShotError):
    """Location transforms require even height and width."""


class DegenerateBatch(FewShotError):
    """Contrastive loss needs at least two pairs."""


class IncompatibleTasks(FewShotError):
    """Task combination cannot share one composed batch (e.g. CONTRAST mixed in)."""


class MissingTask(FewShotError):
    """Logits or labels missing for an active task."""


# --- trainer / meta -----------------------------------------------------

class DivergenceDetected(FewShotError):
    """Training loss became non-finite; carries the last good state."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


class EmptyHistory(FewShotError):
    """No checkpoint records to select from."""


class NonFiniteGradient(FewShotError):
    """Meta gradient contains NaN or Inf."""


# --- adapt --------------------------------------------------------------

class SingularFeatures(FewShotError):
    """Feature matrix contains non-finite columns."""


class InsufficientAux(FewShotError):
    """Auxiliary pool too small for the requested draw."""


class IncompatibleScheme(FewShotError):
    """Vote scheme cannot be hosted by the given inputs without upscaling."""


class EmptyInput(FewShotError):
    """Aggregation called on an empty sequence."""
