"""
errors.py
Exception hierarchy shared by every module in the package.

Library code raises these; only driver.py turns them into exit codes.
"""

from typing import Optional


class DecisionLayerError(Exception):
    """Base class for all errors raised by decision_layer."""


class ConfigurationError(DecisionLayerError):
    """
    Invalid configuration value or unknown registry key

    Attributes:
        field_path: Dotted path of the offending field (e.g. "retrieval.tau"), if known
    """

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class EvaluationError(DecisionLayerError):
    """A reward or cost evaluator failed while scoring an action."""


class NoFeasibleActionError(DecisionLayerError):
    """The feasibility predicate rejected every offered action."""


class EstimatorUnavailableError(DecisionLayerError):
    """External estimator timed out, was unreachable or sent a malformed reply."""


class SequencingError(DecisionLayerError):
    """A turn record was appended out of order."""


class IncompleteTraceError(DecisionLayerError):
    """A trace lacks the per-round signals needed for replay."""


class PreconditionError(DecisionLayerError):
    """An operation was called on input outside its contract."""


class InconsistentStateError(DecisionLayerError):
    """Search or decision state violates one of its invariants."""


class GraphGenerationError(DecisionLayerError):
    """The organisation graph could not be generated as requested."""


class SynthesisError(DecisionLayerError):
    """The synthetic corpus generator could not hit a requested bucket."""


class DataError(DecisionLayerError):
    """Ingested corpus or question data is inconsistent."""


class ExperimentError(DecisionLayerError):
    """
    An environment error raised inside one run of an experiment

    Attributes:
        run_index: Index of the failing run
    """

    def __init__(self, message: str, run_index: int):
        self.run_index = run_index
        super().__init__(f"run {run_index}: {message}")
