"""Custom exceptions for tokrec."""

from typing import Any

# Process exit codes used by the CLI.
EXIT_USAGE = 2
EXIT_STATE = 3


class TokrecError(Exception):
    """Base exception for all tokrec errors."""

    exit_code = EXIT_USAGE


class InteractionParseError(TokrecError):
    """Raised when an interactions file line is malformed."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


class EmptyDatasetError(TokrecError):
    """Raised when a dataset would contain no edges."""

    def __init__(self, detail: str | None = None):
        msg = "Dataset has no interactions."
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class FeatureFormatError(TokrecError):
    """Raised when a feature file does not follow the MFEA or CSV layout."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"Invalid feature file '{path}': {reason}")


class FeatureShapeError(FeatureFormatError):
    """Raised when a feature matrix has the wrong number of rows."""

    def __init__(self, path: str, expected: int, found: int):
        self.expected = expected
        self.found = found
        super().__init__(path, f"expected {expected} rows, found {found}")


class FeatureDataError(TokrecError):
    """Raised when a feature matrix holds a non-finite value."""

    def __init__(self, path: str, row: int, col: int):
        self.path = path
        self.row = row
        self.col = col
        super().__init__(f"Non-finite feature value in '{path}' at row {row}, col {col}")


class DivisibilityError(TokrecError):
    """Raised when a feature dimension cannot be split into equal subvectors."""

    def __init__(self, dim: int, num_slots: int, modality: str | None = None):
        self.dim = dim
        self.num_slots = num_slots
        self.modality = modality
        where = f" for modality '{modality}'" if modality else ""
        super().__init__(
            f"Feature dimension {dim}{where} is not divisible by D={num_slots}."
        )


class ConfigurationError(TokrecError):
    """Raised when a run configuration is inconsistent."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"Invalid configuration: {reason}")


class MissingInputError(TokrecError):
    """Raised when a required input file is absent."""

    def __init__(self, path: str, what: str, hint: str | None = None):
        self.path = path
        self.what = what
        msg = f"Missing {what}: {path}"
        if hint:
            msg = f"{msg}. {hint}"
        super().__init__(msg)


class UnknownItemError(TokrecError):
    """Raised when an item ID is not part of the dataset."""

    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"Unknown item: {item_id}")


class SamplingError(TokrecError):
    """Raised when no negative item exists for a user."""

    def __init__(self, user: int | None = None, reason: str | None = None):
        self.user = user
        if reason is None:
            reason = f"user {user} has interacted with every item"
        super().__init__(f"Cannot sample negative items: {reason}")


class EmptyValidationError(TokrecError):
    """Raised when early stopping is requested without a validation split."""

    def __init__(self) -> None:
        super().__init__(
            "Validation split is empty. Early stopping needs validation edges; "
            "train with evaluation off (max_epochs fixed, no validation) instead."
        )


class TokenCorruptionError(TokrecError):
    """Raised when a token ID falls outside its codebook."""

    exit_code = EXIT_STATE

    def __init__(self, modality: str, item: int, slot: int, token: int, codebook_size: int):
        self.modality = modality
        self.item = item
        self.slot = slot
        self.token = token
        self.codebook_size = codebook_size
        super().__init__(
            f"Token {token} of item {item} ({modality} slot {slot}) "
            f"is outside [0, {codebook_size})"
        )


class TrainingDivergedError(TokrecError):
    """Raised when a training batch produces a non-finite loss.

    Attributes:
        epoch: 1-based epoch in which the batch failed.
        batch_index: 0-based batch index within the epoch.
        batch: Diagnostic dump of the offending batch (JSON-serializable).
    """

    exit_code = EXIT_STATE

    def __init__(self, epoch: int, batch_index: int, batch: dict[str, Any]):
        self.epoch = epoch
        self.batch_index = batch_index
        self.batch = batch
        super().__init__(
            f"Non-finite loss in epoch {epoch}, batch {batch_index}."
        )


class CheckpointFormatError(TokrecError):
    """Raised when a checkpoint file cannot be decoded."""

    exit_code = EXIT_STATE

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"Invalid checkpoint '{path}': {reason}")


class CheckpointMismatchError(TokrecError):
    """Raised when checkpoint arrays disagree with the configured model."""

    exit_code = EXIT_STATE

    def __init__(self, name: str, expected: Any, found: Any):
        self.name = name
        self.expected = expected
        self.found = found
        super().__init__(
            f"Checkpoint does not match configuration: '{name}' expected {expected}, found {found}"
        )


class ParameterAuditError(TokrecError):
    """Raised when formula parameter counts disagree with the allocated arrays."""

    exit_code = EXIT_STATE

    def __init__(self, expected: dict[str, int], found: dict[str, int]):
        self.expected = expected
        self.found = found
        super().__init__(f"Parameter audit {expected} disagrees with allocated arrays {found}")
