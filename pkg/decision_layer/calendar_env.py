"""
calendar_env.py
Clarify-vs-execute environment for a meeting scheduler.

- Scenarios come from one base fact set with 0-4 fields withheld, each either
  simply absent or replaced by a vague reference the user never resolves on their own.
- The extractor is an oracle over structured utterance values with a confirmed-field
  lock; optional seeded noise models an imperfect extractor.
- Questions are templated. The "drifting" mode substitutes an already confirmed field
  for a missing one, which is the failure an unconstrained question writer shows.
- The simulated user answers exactly what is asked and nothing else.

Episode flow (dc):
    extract -> dc_policy -> (question + answer) or execute, until a valid execution or T turns.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import PreconditionError
from .shared_types import Action, ActionKind
from .signal_kit import NoiseSpec, apply_noise
from .trace_log import EpisodeTrace, TurnRecord, append_turn

logger = logging.getLogger(__name__)

# Configurations

FIELDS: Tuple[str, ...] = ("date", "start_time", "duration_min", "attendees")

# Fields are withheld in this order as k grows
WITHHOLD_ORDER: Tuple[str, ...] = ("duration_min", "date", "start_time", "attendees")

# First observed field in this order becomes the vague one in unresolvable variants
VAGUE_PRIORITY: Tuple[str, ...] = ("date", "start_time", "attendees")

VAGUE_PHRASES: Dict[str, str] = {
    "date": "Jack's usual slot",
    "start_time": "Jack's usual time",
    "attendees": "the usual team",
}

FIELD_LABELS: Dict[str, str] = {
    "date": "date",
    "start_time": "start time",
    "duration_min": "duration in minutes",
    "attendees": "attendees",
}

CONFIRMATION_QUESTION = "Could you confirm the meeting details are correct?"
ACKNOWLEDGEMENT = "Yes."
DEFAULT_BUDGET = 6


class Ambiguity(Enum):
    ABSENT = "absent"
    UNRESOLVABLE = "unresolvable"
    NOT_APPLICABLE = "not_applicable"


class QuestionMode(Enum):
    TARGETED = "targeted"
    DRIFTING = "drifting"


@dataclass(frozen=True)
class EventFields:
    """
    The four fields of a calendar event

    Attributes:
        date: ISO-8601 date
        start_time: HH:MM, 24h
        duration_min: Positive minutes
        attendees: Non-empty list of names
    """
    date: str
    start_time: str
    duration_min: int
    attendees: Tuple[str, ...]

    def __post_init__(self):
        if self.duration_min <= 0:
            raise PreconditionError(f"duration_min must be positive, got {self.duration_min}")
        if not self.attendees:
            raise PreconditionError("attendees must not be empty")

    def value(self, name: str) -> Any:
        if name == "attendees":
            return list(self.attendees)
        return getattr(self, name)

    def to_dict(self) -> Dict[str, Any]:
        return {name: self.value(name) for name in FIELDS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EventFields":
        return cls(
            date=data["date"],
            start_time=data["start_time"],
            duration_min=int(data["duration_min"]),
            attendees=tuple(data["attendees"]),
        )


BASE_FACTS = EventFields(date="2026-02-17", start_time="11:30", duration_min=30, attendees=("Jack",))


@dataclass(frozen=True)
class Utterance:
    """
    One conversation entry

    Attributes:
        speaker: "user" or "assistant"
        text: Surface text
        values: Structured field values carried by the text (vague phrases included verbatim)
    """
    speaker: str
    text: str
    values: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class CalendarScenario:
    """
    One scheduling task

    Attributes:
        id: k0, k1-absent, k1-unresolvable, ..., k4
        k: Number of fields withheld from the initial query
        ambiguity: Whether the query also references one field vaguely (unresolvable)
        initial_query: Opening user message
        private_facts: Ground-truth event the user has in mind
        withheld: Fields left out of the query, in withholding order
        vague: field -> vague phrase used in the query instead of the value
    """
    id: str
    k: int
    ambiguity: Ambiguity
    initial_query: str
    private_facts: EventFields
    withheld: Tuple[str, ...] = ()
    vague: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.withheld) != self.k:
            raise PreconditionError(f"{self.id}: k={self.k} but {len(self.withheld)} fields withheld")
        if (self.ambiguity == Ambiguity.NOT_APPLICABLE) != (self.k in (0, 4)):
            raise PreconditionError(f"{self.id}: ambiguity {self.ambiguity.value} invalid for k={self.k}")

    @property
    def vague_phrases(self) -> Tuple[str, ...]:
        return tuple(self.vague.values())

    def initial_values(self) -> Dict[str, Any]:
        values: Dict[str, Any] = {}
        for name in FIELDS:
            if name in self.withheld:
                continue
            values[name] = self.vague.get(name, self.private_facts.value(name))
        return values

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "k": self.k,
            "ambiguity": self.ambiguity.value,
            "initial_query": self.initial_query,
            "private_facts": self.private_facts.to_dict(),
            "withheld": list(self.withheld),
            "vague": dict(self.vague),
        }


@dataclass(frozen=True)
class ExtractorReport:
    """Per-field presence booleans; p_suff is the confirmed fraction."""
    fields: Dict[str, bool] = field(default_factory=lambda: {name: False for name in FIELDS})

    @property
    def p_suff(self) -> float:
        return sum(1 for name in FIELDS if self.fields.get(name)) / len(FIELDS)

    @property
    def missing(self) -> List[str]:
        return [name for name in FIELDS if not self.fields.get(name)]

    @property
    def confirmed(self) -> List[str]:
        return [name for name in FIELDS if self.fields.get(name)]

    def to_dict(self) -> Dict[str, bool]:
        return {name: bool(self.fields.get(name)) for name in FIELDS}


@dataclass(frozen=True)
class QuestionDraft:
    question: str
    targets: List[str]


@dataclass(frozen=True)
class ExecutionResult:
    event: Dict[str, Any]
    valid: bool


def _compose_query(values: Dict[str, Any]) -> str:
    parts = ["Schedule a meeting"]
    if "attendees" in values:
        attendees = values["attendees"]
        parts.append(f" with {attendees if isinstance(attendees, str) else ' and '.join(attendees)}")
    if "date" in values:
        parts.append(f" on {values['date']}")
    if "start_time" in values:
        parts.append(f" at {values['start_time']}")
    if "duration_min" in values:
        parts.append(f" for {values['duration_min']} minutes")
    return "".join(parts) + "."


def generate_scenarios(facts: EventFields = BASE_FACTS) -> List[CalendarScenario]:
    """The 8 scenarios: k=0 and k=4 once each, k=1..3 as absent and unresolvable variants."""
    scenarios: List[CalendarScenario] = []
    for k in range(len(FIELDS) + 1):
        withheld = WITHHOLD_ORDER[:k]
        if k in (0, len(FIELDS)):
            variants = [(Ambiguity.NOT_APPLICABLE, withheld, {})]
        else:
            observed = [name for name in FIELDS if name not in withheld]
            vague_field = next(name for name in VAGUE_PRIORITY if name in observed)
            variants = [
                (Ambiguity.ABSENT, withheld, {}),
                (Ambiguity.UNRESOLVABLE, withheld, {vague_field: VAGUE_PHRASES[vague_field]}),
            ]
        for ambiguity, held, vague in variants:
            scenario_id = f"k{k}" if ambiguity == Ambiguity.NOT_APPLICABLE else f"k{k}-{ambiguity.value}"
            values = {
                name: vague.get(name, facts.value(name)) for name in FIELDS if name not in held
            }
            scenarios.append(CalendarScenario(
                id=scenario_id,
                k=k,
                ambiguity=ambiguity,
                initial_query=_compose_query(values),
                private_facts=facts,
                withheld=tuple(held),
                vague=dict(vague),
            ))
    return scenarios


def scenario_by_id(scenario_id: str) -> CalendarScenario:
    for scenario in generate_scenarios():
        if scenario.id == scenario_id:
            return scenario
    raise PreconditionError(f"unknown calendar scenario {scenario_id!r}")


def oracle_extract(
    conversation: Sequence[Utterance],
    scenario: CalendarScenario,
    prior: Optional[ExtractorReport] = None,
    noise: Optional[NoiseSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> ExtractorReport:
    """
    Mark each field present iff a user utterance carries a usable value for it.

    Noise (if any) perturbs the raw scan; the result is then OR-ed with prior.
    """
    vague = set(scenario.vague_phrases)
    scan = {name: False for name in FIELDS}
    for utterance in conversation:
        if utterance.speaker != "user":
            continue
        for name, value in utterance.values.items():
            if name not in scan or value is None:
                continue
            if isinstance(value, str) and value in vague:
                continue
            scan[name] = True

    if noise is not None and not noise.is_identity:
        scan = apply_noise(scan, noise, rng)

    if prior is not None:
        scan = {name: scan[name] or bool(prior.fields.get(name)) for name in FIELDS}
    return ExtractorReport(fields=scan)


def dc_policy(
    p_suff: float,
    last_action: Optional[Action],
    last_valid: Optional[bool],
    missing: Optional[Sequence[str]] = None,
) -> Action:
    """
    Three-branch rule:
        1. last action was a failed execute -> clarify (no blind retry)
        2. p_suff == 1.0 -> execute
        3. otherwise -> clarify every unconfirmed field
    """
    if not 0.0 <= p_suff <= 1.0:
        raise PreconditionError(f"p_suff {p_suff} outside [0, 1]")
    payload = {"fields": list(missing)} if missing is not None else {}
    if last_action is not None and last_action.kind == ActionKind.EXECUTE and last_valid is False:
        return Action.of(ActionKind.CLARIFY, **payload)
    if p_suff >= 1.0:
        return Action.of(ActionKind.EXECUTE)
    return Action.of(ActionKind.CLARIFY, **payload)


def _join_labels(names: Sequence[str]) -> str:
    labels = [FIELD_LABELS[name] for name in names]
    if len(labels) == 1:
        return labels[0]
    return ", ".join(labels[:-1]) + " and " + labels[-1]


def generate_question(
    missing: Sequence[str],
    mode: QuestionMode = QuestionMode.TARGETED,
    drift_rate: float = 0.0,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    confirmed: Sequence[str] = (),
) -> QuestionDraft:
    """
    One templated question about the missing fields.

    In drifting mode, with probability drift_rate, one target is swapped for the
    first confirmed field that is not already asked about.
    """
    if not missing:
        raise PreconditionError("generate_question needs at least one missing field")
    targets = [name for name in FIELDS if name in missing]

    if QuestionMode(mode) == QuestionMode.DRIFTING:
        if rng is None:
            rng = np.random.default_rng(seed)
        if rng.random() < drift_rate:
            index = int(rng.integers(len(targets)))
            replacement = next((name for name in FIELDS if name in confirmed and name not in targets), None)
            if replacement is not None:
                logger.debug("[Calendar] drift: %s -> %s", targets[index], replacement)
                targets[index] = replacement
            targets = [name for name in FIELDS if name in targets]

    return QuestionDraft(question=f"Could you tell me the {_join_labels(targets)}?", targets=targets)


ANSWER_TEMPLATES: Dict[str, str] = {
    "date": "The meeting is on {value}.",
    "start_time": "It starts at {value}.",
    "duration_min": "The meeting lasts for {value} minutes.",
    "attendees": "It's with {value}.",
}


def answer_values(targets: Iterable[str], facts: EventFields) -> Dict[str, Any]:
    return {name: facts.value(name) for name in FIELDS if name in set(targets)}


def simulate_user(targets: Sequence[str], facts: EventFields) -> str:
    """Answer exactly the targeted fields with their true values."""
    if not targets:
        return ACKNOWLEDGEMENT
    sentences = []
    for name, value in answer_values(targets, facts).items():
        shown = " and ".join(value) if name == "attendees" else value
        sentences.append(ANSWER_TEMPLATES[name].format(value=shown))
    return " ".join(sentences)


def execute_event(
    report: ExtractorReport,
    conversation: Sequence[Utterance],
    facts: EventFields,
) -> ExecutionResult:
    """Build the event from the latest value of each confirmed field; null elsewhere."""
    event: Dict[str, Any] = {name: None for name in FIELDS}
    for name in report.confirmed:
        for utterance in reversed(conversation):
            if utterance.speaker == "user" and utterance.values.get(name) is not None:
                event[name] = utterance.values[name]
                break

    valid = all(event[name] is not None for name in FIELDS)
    if valid:
        for name in FIELDS:
            value = event[name]
            expected = facts.value(name)
            if name == "attendees":
                valid = not isinstance(value, str) and list(value) == expected
            else:
                valid = value == expected
            if not valid:
                break
    return ExecutionResult(event=event, valid=valid)


def _finish(trace: EpisodeTrace, scenario: CalendarScenario, wasted: int, clarifications: int) -> EpisodeTrace:
    last = trace.last_turn
    success = bool(last is not None and last.valid)
    first = trace.turns[0].action.kind if trace.turns else None
    optimal = ActionKind.EXECUTE if scenario.k == 0 else ActionKind.CLARIFY
    metrics = {
        "success": 1.0 if success else 0.0,
        "first_action_optimal": 1.0 if first == optimal else 0.0,
        "wasted": float(wasted),
        "clarifications": float(clarifications),
        "turns": float(len(trace.turns)),
    }
    logger.info(
        "[Calendar] %s/%s seed=%d success=%s turns=%d wasted=%d",
        scenario.id, trace.method_id, trace.seed, success, len(trace.turns), wasted,
        extra={"scenario_id": scenario.id, "method": trace.method_id, "seed": trace.seed},
    )
    return trace.finish(success, metrics)


def run_calendar_episode(
    method: str,
    scenario: CalendarScenario,
    T: int = DEFAULT_BUDGET,
    seed: int = 0,
    mode: QuestionMode = QuestionMode.TARGETED,
    drift_rate: float = 0.0,
    noise: Optional[NoiseSpec] = None,
) -> EpisodeTrace:
    """
    Run one episode with method "dc" or "retry".

    Noise and drift draw from two independent streams spawned from seed.
    """
    if T < 1:
        raise PreconditionError(f"turn budget must be >= 1, got {T}")
    if method not in ("dc", "retry"):
        raise PreconditionError(f"unknown calendar method {method!r}")

    noise_seq, drift_seq = np.random.SeedSequence(seed).spawn(2)
    noise_rng = np.random.default_rng(noise_seq)
    drift_rng = np.random.default_rng(drift_seq)
    mode = QuestionMode(mode)
    facts = scenario.private_facts

    trace = EpisodeTrace(
        scenario_id=scenario.id,
        method_id=method,
        seed=seed,
        tags={
            "k": scenario.k,
            "ambiguity": scenario.ambiguity.value,
            "budget": T,
            "mode": mode.value,
            "drift_rate": drift_rate,
            "noise_fn": noise.false_negative_rate if noise else 0.0,
            "noise_fp": noise.false_positive_rate if noise else 0.0,
        },
    )
    conversation: List[Utterance] = [Utterance("user", scenario.initial_query, scenario.initial_values())]
    report = ExtractorReport()
    last_action: Optional[Action] = None
    last_valid: Optional[bool] = None
    wasted = 0
    clarifications = 0

    for turn in range(1, T + 1):
        if method == "retry":
            report = oracle_extract(conversation, scenario, prior=report)
            result = execute_event(report, conversation, facts)
            wasted += 0 if result.valid else 1
            record = TurnRecord(
                turn=turn,
                signals={},
                flags={},
                action=Action.of(ActionKind.EXECUTE),
                valid=result.valid,
                observations={"report": report.to_dict(), "event": result.event},
            )
        else:
            report = oracle_extract(conversation, scenario, prior=report, noise=noise, rng=noise_rng)
            missing = report.missing
            last_failed = bool(last_action is not None and last_action.kind == ActionKind.EXECUTE and last_valid is False)
            action = dc_policy(report.p_suff, last_action, last_valid, missing=missing)
            observations: Dict[str, Any] = {"report": report.to_dict(), "missing": missing}

            if action.kind == ActionKind.EXECUTE:
                result = execute_event(report, conversation, facts)
                valid = result.valid
                wasted += 0 if valid else 1
                observations["event"] = result.event
            else:
                clarifications += 1
                if missing:
                    draft = generate_question(missing, mode, drift_rate, rng=drift_rng, confirmed=report.confirmed)
                else:
                    # Everything is locked in but the last execution failed
                    draft = QuestionDraft(question=CONFIRMATION_QUESTION, targets=[])
                answer = simulate_user(draft.targets, facts)
                values = answer_values(draft.targets, facts)
                conversation.append(Utterance("assistant", draft.question))
                conversation.append(Utterance("user", answer, values))
                observations.update({
                    "question": draft.question,
                    "targets": draft.targets,
                    "answer": answer,
                    "answer_values": values,
                })
                valid = False

            record = TurnRecord(
                turn=turn,
                signals={"p_suff": report.p_suff},
                flags={"last_execute_failed": last_failed},
                action=action,
                valid=valid,
                observations=observations,
            )
            last_action, last_valid = action, valid

        logger.debug(
            "[Calendar] %s turn %d %s valid=%s", scenario.id, turn, record.action.id, record.valid,
            extra={"scenario_id": scenario.id, "turn": turn},
        )
        trace = append_turn(trace, record)
        if record.valid:
            break

    return _finish(trace, scenario, wasted, clarifications)


def calendar_metrics(traces: Sequence[EpisodeTrace]) -> Dict[str, float]:
    """Per-run averages: success, first-action optimality, wasted executions, clarifications, turns."""
    if not traces:
        raise PreconditionError("calendar_metrics needs at least one trace")

    def mean(name: str) -> float:
        return float(np.mean([trace.metrics.get(name, 0.0) for trace in traces]))

    return {
        "success_rate": float(np.mean([1.0 if trace.success else 0.0 for trace in traces])),
        "first_action_optimality": mean("first_action_optimal"),
        "wasted_executions": mean("wasted"),
        "clarifications": mean("clarifications"),
        "avg_turns": mean("turns"),
    }
