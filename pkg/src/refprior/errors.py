"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the CLI can map failures onto its
documented process status without inspecting messages.
"""


class RefPriorError(Exception):
    """Base class for all structured errors raised by refprior."""

    exit_code = 2


class ShapeError(RefPriorError, ValueError):
    """Incompatible tensor or image shapes."""


class ConfigError(RefPriorError, ValueError):
    """Invalid hyperparameters or model geometry."""

    exit_code = 1


class FormatError(RefPriorError):
    """Malformed file content (PPM/PGM, checkpoint, manifest)."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class DataError(RefPriorError):
    """Missing or inconsistent dataset content."""


class NumericalError(RefPriorError, ArithmeticError):
    """Non-finite values or a documented division hazard."""

    exit_code = 3
