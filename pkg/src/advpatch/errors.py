"""Exception types shared across the package."""


class AdvPatchError(Exception):
    """Base class for all advpatch errors."""


class ShapeError(AdvPatchError):
    """Operand shapes do not conform to an operation's contract."""


class NumericsError(AdvPatchError):
    """Non-finite values encountered where finite math is required."""


class StateError(AdvPatchError):
    """An object was used in a way its lifecycle forbids (e.g. double backward)."""


class ArchitectureError(AdvPatchError):
    """A layer spec chain is inconsistent or otherwise invalid."""


class DataError(AdvPatchError):
    """A dataset or split is empty, missing, or malformed at the semantic level."""


class FormatError(AdvPatchError):
    """A binary artifact is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(AdvPatchError):
    """A configuration value or combination is invalid."""
