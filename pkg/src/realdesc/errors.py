"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ValidationError -> 2,
ExternalServiceError -> 3, DataError -> 4.
"""


class RealdescError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RealdescError):
    """Bad arguments, configs, or inputs that violate a documented contract."""


class ShapeError(ValidationError):
    """Tensor shape or dimension mismatch."""


class ExternalServiceError(RealdescError):
    """Failures talking to remote services (model registry, LLM endpoint)."""


class RegistryError(ExternalServiceError):
    """Checkpoint identifier cannot be resolved locally or remotely."""


class IntegrityError(ExternalServiceError):
    """Checkpoint assets exist but are corrupted or incomplete."""


class GenerationError(ExternalServiceError):
    """Description generation failed after retries."""


class DataError(RealdescError):
    """Dataset-level problems: missing files, unknown labels, bad annotations."""


class CurationError(DataError):
    """Training-corpus curation violated an exclusion or coverage rule."""


class TrainingDivergence(RealdescError):
    """Optimization produced a non-finite loss; a diagnostic snapshot was written."""

