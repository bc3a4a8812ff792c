"""Error types raised by the detection pipeline.

Every failure the pipeline reports on purpose derives from FewShotError so the
HTTP layer and the CLI can tell expected failures from bugs.
"""

from typing import Any, Dict, Optional


class FewShotError(Exception):
    """Base class for all pipeline errors"""


# Ontology / dataset construction
class MalformedOntology(FewShotError):
    pass


class EmptyVocabulary(FewShotError):
    pass


class InvalidConfig(FewShotError):
    pass


# Features
class TooShort(FewShotError):
    pass


class EmptyStream(FewShotError):
    pass


class DimensionMismatch(FewShotError):
    pass


# Episodes
class InvalidSizes(FewShotError):
    pass


class UnknownDomain(FewShotError):
    pass


class EmptyDomain(FewShotError):
    pass


class InsufficientPositives(FewShotError):
    def __init__(self, event: str, available: int, required: int):
        self.event = event
        self.available = available
        self.required = required
        super().__init__(f"Event '{event}' has {available} positive clips, {required} required")


class InsufficientNegatives(FewShotError):
    def __init__(self, available: int, required: int):
        self.available = available
        self.required = required
        super().__init__(f"Negative pool has {available} clips, {required} required")


# Models and training
class ShapeMismatch(FewShotError):
    pass


class DomainError(FewShotError):
    pass


class NonFiniteLoss(FewShotError):
    """Raised when a training step produces a NaN/inf loss.

    The model passed to the trainer has already been restored to the last
    finite state; that state is also attached here.
    """

    def __init__(self, step: int, last_finite_state: Optional[Dict[str, Any]] = None):
        self.step = step
        self.last_finite_state = last_finite_state
        super().__init__(f"Non-finite loss at step {step}")


class CheckpointIoError(FewShotError):
    pass


class VersionMismatch(FewShotError):
    pass


class IncompatibleCheckpoint(FewShotError):
    pass


# Few-shot scorers
class NoPositiveSupport(FewShotError):
    def __init__(self, event_index: int):
        self.event_index = event_index
        super().__init__(f"No positive support sample for event {event_index}")


class NoNegativeSupport(FewShotError):
    def __init__(self, event_index: int):
        self.event_index = event_index
        super().__init__(f"No negative support sample for event {event_index}")


class SolverFailure(FewShotError):
    pass


class DegenerateInput(FewShotError):
    pass


class IllConditionedKkt(UserWarning):
    """Warning category: the KKT system needed jitter to be solved"""


# Evaluation
class DegenerateLabels(FewShotError):
    pass


class ExperimentStageError(FewShotError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")
