"""
shared_types.py
Shared data structures used across the decision core, the environments and the harness

These classes are imported by every module to keep one definition of actions,
signals and decision contexts without circular imports between environments.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from .errors import InconsistentStateError, PreconditionError

logger = logging.getLogger(__name__)


class ActionKind(Enum):
    """
    Enumeration of action kinds a policy may choose
    """
    EXECUTE = "execute"
    CLARIFY = "clarify"
    BACKTRACK = "backtrack"
    ACCEPT = "accept"
    STOP = "stop"
    EXPAND = "expand"
    CUSTOM = "custom"


# Allowed payload keys per kind. None means free-form.
PAYLOAD_SCHEMA: Dict[ActionKind, Optional[frozenset]] = {
    ActionKind.EXECUTE: frozenset({"fields", "node_id"}),
    ActionKind.CLARIFY: frozenset({"fields", "attribute"}),
    ActionKind.BACKTRACK: frozenset({"node_id"}),
    ActionKind.ACCEPT: frozenset({"node_id"}),
    ActionKind.STOP: frozenset({"k"}),
    ActionKind.EXPAND: frozenset({"k"}),
    ActionKind.CUSTOM: None,
}


@dataclass(frozen=True)
class Action:
    """
    One candidate action at a decision point

    Attributes:
        id: Symbolic identifier, unique within an offered action set
        kind: Action kind
        payload: Optional parameters (attribute to ask, node to visit, expansion size)
    """
    id: str
    kind: ActionKind
    payload: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        allowed = PAYLOAD_SCHEMA[self.kind]
        if allowed is not None:
            unknown = set(self.payload) - allowed
            if unknown:
                raise PreconditionError(
                    f"payload keys {sorted(unknown)} not allowed for {self.kind.value} actions"
                )

    @classmethod
    def of(cls, kind: ActionKind, **payload: Any) -> "Action":
        """Build an action whose id is its kind name."""
        return cls(id=kind.value, kind=kind, payload=dict(payload))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization"""
        return {"id": self.id, "kind": self.kind.value, "payload": dict(self.payload)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Action":
        return cls(id=data["id"], kind=ActionKind(data["kind"]), payload=dict(data.get("payload") or {}))


class SignalSource(Enum):
    """
    Where a signal value came from
    """
    ORACLE = "oracle"
    LEXICAL = "lexical"
    EXTERNAL = "external"
    COMPOSITE = "composite"
    NOISY = "noisy"


@dataclass(frozen=True)
class Signal:
    """
    A named decision-relevant scalar in [0, 1]

    Attributes:
        name: Identifier (p_suff, p_corr, p_dense, p_llm, p_hat)
        value: Real in [0, 1]
        source: Which estimator produced it
        detail: Optional breakdown (per-field booleans, per-attribute fractions)
    """
    name: str
    value: float
    source: SignalSource = SignalSource.ORACLE
    detail: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise PreconditionError(f"signal {self.name} value {self.value} outside [0, 1]")

    @classmethod
    def clamped(
        cls,
        name: str,
        value: float,
        source: SignalSource = SignalSource.EXTERNAL,
        detail: Optional[Dict[str, Any]] = None,
    ) -> "Signal":
        """Build a signal, clamping out-of-range values into [0, 1] with a warning."""
        clipped = min(1.0, max(0.0, float(value)))
        if clipped != value:
            logger.warning(
                "[Signal] %s value %.4f clamped to %.4f", name, value, clipped,
                extra={"signal": name, "raw_value": value},
            )
        return cls(name=name, value=clipped, source=source, detail=dict(detail or {}))

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "value": self.value, "source": self.source.value, "detail": self.detail}


@dataclass
class DecisionContext:
    """
    Everything a policy may look at for one decision

    Attributes:
        signals: name -> Signal
        flags: name -> bool (last_execute_failed, just_traversed, ...)
        counters: name -> non-negative int (turn, budget, n_candidates, n_untried, n_hidden)
        history: One summary per completed turn, oldest first
    """
    signals: Dict[str, Signal] = field(default_factory=dict)
    flags: Dict[str, bool] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)

    def __post_init__(self):
        for name, count in self.counters.items():
            if count < 0:
                raise InconsistentStateError(f"counter {name} is negative ({count})")
        turn = self.counters.get("turn")
        budget = self.counters.get("budget")
        if turn is not None and budget is not None and turn > budget:
            raise InconsistentStateError(f"turn {turn} exceeds budget {budget}")
        if turn is not None and len(self.history) != turn:
            raise InconsistentStateError(
                f"history has {len(self.history)} entries but turn counter is {turn}"
            )

    def value(self, name: str, default: Optional[float] = None) -> Optional[float]:
        """Value of a signal, or default if the signal is absent."""
        signal = self.signals.get(name)
        return signal.value if signal is not None else default

    def snapshot(self) -> Dict[str, Any]:
        """Plain-value copy with stable key order, used in records and on the wire."""
        return {
            "signals": {name: self.signals[name].value for name in sorted(self.signals)},
            "flags": {name: self.flags[name] for name in sorted(self.flags)},
            "counters": {name: self.counters[name] for name in sorted(self.counters)},
            "history": [dict(entry) for entry in self.history],
        }


@dataclass(frozen=True)
class DecisionRecord:
    """
    Result of one call to decide()

    Attributes:
        context: Snapshot of the context the rule saw
        offered: Actions offered at this decision point
        chosen: The selected action (always one of offered)
        rule_id: Registered rule name
        params: Rule parameters used
    """
    context: Dict[str, Any]
    offered: Tuple[Action, ...]
    chosen: Action
    rule_id: str
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.chosen.id not in {action.id for action in self.offered}:
            raise InconsistentStateError(f"chosen action {self.chosen.id} not among offered actions")

    def to_dict(self) -> Dict[str, Any]:
        """Serialization with a fixed key order shared with trace files."""
        return {
            "rule_id": self.rule_id,
            "params": dict(self.params),
            "context": self.context,
            "offered": [action.to_dict() for action in self.offered],
            "chosen": self.chosen.to_dict(),
        }


class AttributionCategory(Enum):
    """
    Component blamed for a failed episode
    """
    SIGNAL_ESTIMATION = "signal_estimation"
    DECISION_POLICY = "decision_policy"
    QUESTION_GENERATION = "question_generation"
    EXECUTION = "execution"
    EARLY_STOP_DENSE = "early_stop_dense"
    EARLY_STOP_LLM = "early_stop_llm"
    EARLY_STOP_BOTH = "early_stop_both"
    CORPUS_GAP = "corpus_gap"


@dataclass(frozen=True)
class AttributionLabel:
    """
    Attribution of one failed episode

    Attributes:
        category: The blamed component
        evidence: (turn, field, value) triples citing the trace
    """
    category: AttributionCategory
    evidence: Tuple[Tuple[int, str, Any], ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "category": self.category.value,
            "evidence": [list(item) for item in self.evidence],
        }


@dataclass
class ExperimentResult:
    """
    Standard result structure returned by the harness

    Attributes:
        success: Whether every run completed
        data: Main payload (traces, tables)
        errors: Error messages if a run failed
        metadata: Config echo, timings and output paths
    """
    success: bool
    data: Optional[Dict[str, Any]] = None
    errors: Optional[List[str]] = None
    metadata: Optional[Dict[str, Any]] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization"""
        return {
            "success": self.success,
            "data": self.data,
            "errors": self.errors,
            "metadata": self.metadata,
        }

    def __str__(self) -> str:
        if self.success:
            return f"ExperimentResult(success=True, metadata={self.metadata})"
        return f"ExperimentResult(success=False, errors={self.errors})"
