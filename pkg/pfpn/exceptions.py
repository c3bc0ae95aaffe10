# -*- coding: utf-8 -*-

"""
Error types raised across pfpn.

The CLI maps these onto exit codes: `DataError`, `ContractError`,
`DegenerateInputError` and `ArchSpecError` exit with 2, anything else with 3.
"""

__all__ = [
    "PfpnError",
    "ContractError",
    "DegenerateInputError",
    "DataError",
    "DatasetFileError",
    "DatasetFormatError",
    "DatasetValidationError",
    "ArchSpecError",
    "TrainingDivergedError",
]


class PfpnError(Exception):
    """Base class for every error raised by pfpn."""


class ContractError(PfpnError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class DegenerateInputError(PfpnError, ValueError):
    """The input is well formed but leaves a quantity undefined (e.g. 0/0)."""


class DataError(PfpnError):
    """Base class for problems with files on disk."""


class DatasetFileError(DataError, FileNotFoundError):
    """A referenced file does not exist."""


class DatasetFormatError(DataError):
    """A file exists but cannot be parsed."""


class DatasetValidationError(DataError):
    """
    A parsed record violates a panoptic invariant.

    Attributes:
        image_id: The offending image, when known.
        segment_id: The offending segment, when known.
    """

    def __init__(self, message, image_id=None, segment_id=None):
        super().__init__(message)
        self.image_id = image_id
        self.segment_id = segment_id


class ArchSpecError(PfpnError, ValueError):
    """An architecture description is not a consistent layer graph."""


class TrainingDivergedError(PfpnError):
    """The training loss became non-finite."""

    def __init__(self, step, value):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value
