"""
trace_log.py
Append-only episode traces and their line-delimited JSON file format.

File layout per episode:
    {"episode": {"scenario_id", "method_id", "seed", "tags"}}
    {"turn", "signals", "flags", "action", "outcome": {"valid", "observations"}, "note"}  (one per turn)
    {"success", "metrics", "rounds"}
Several episodes are concatenated in one file.
"""

import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .errors import DataError, PreconditionError, SequencingError
from .shared_types import Action


@dataclass(frozen=True)
class TurnRecord:
    """
    One logged decision

    Attributes:
        turn: 1-based position in the episode
        signals: Signal values the policy saw
        flags: Flags the policy saw
        action: The chosen action
        valid: Whether the action's outcome completed the task
        observations: Environment observations produced by the action
        note: Free text
    """
    turn: int
    signals: Dict[str, float]
    flags: Dict[str, bool]
    action: Action
    valid: bool = False
    observations: Dict[str, Any] = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        if self.turn < 1:
            raise SequencingError(f"turn numbers start at 1, got {self.turn}")
        for name, value in self.signals.items():
            if not 0.0 <= value <= 1.0:
                raise PreconditionError(f"turn {self.turn}: signal {name}={value} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "turn": self.turn,
            "signals": {name: self.signals[name] for name in sorted(self.signals)},
            "flags": {name: self.flags[name] for name in sorted(self.flags)},
            "action": self.action.to_dict(),
            "outcome": {"valid": self.valid, "observations": self.observations},
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TurnRecord":
        outcome = data.get("outcome") or {}
        return cls(
            turn=int(data["turn"]),
            signals={k: float(v) for k, v in (data.get("signals") or {}).items()},
            flags={k: bool(v) for k, v in (data.get("flags") or {}).items()},
            action=Action.from_dict(data["action"]),
            valid=bool(outcome.get("valid", False)),
            observations=dict(outcome.get("observations") or {}),
            note=data.get("note", ""),
        )


@dataclass(frozen=True)
class EpisodeTrace:
    """
    Append-only log of one episode

    Attributes:
        scenario_id: Scenario identifier (calendar id, S1..S5, question id)
        method_id: dc, retry, dc_llm, dc_dense, dc_composite
        seed: Episode seed
        turns: Ordered turn records
        success: Outcome under the environment's success rule
        metrics: Per-episode numbers (turns, wasted, clarifications, ...)
        tags: Scenario metadata (k, ambiguity, bucket, recorded tau/alpha)
        rounds: Retrieval only, per-round signal table up to budget
    """
    scenario_id: str
    method_id: str
    seed: int
    turns: Tuple[TurnRecord, ...] = ()
    success: bool = False
    metrics: Dict[str, float] = field(default_factory=dict)
    tags: Dict[str, Any] = field(default_factory=dict)
    rounds: Tuple[Dict[str, Any], ...] = ()

    @property
    def last_turn(self) -> Optional[TurnRecord]:
        return self.turns[-1] if self.turns else None

    def finish(self, success: bool, metrics: Dict[str, float], rounds: Iterable[Dict[str, Any]] = ()) -> "EpisodeTrace":
        return replace(self, success=success, metrics=dict(metrics), rounds=tuple(dict(r) for r in rounds))

    def header(self) -> Dict[str, Any]:
        return {
            "episode": {
                "scenario_id": self.scenario_id,
                "method_id": self.method_id,
                "seed": self.seed,
                "tags": dict(self.tags),
            }
        }

    def terminator(self) -> Dict[str, Any]:
        line: Dict[str, Any] = {
            "success": self.success,
            "metrics": {name: self.metrics[name] for name in sorted(self.metrics)},
        }
        if self.rounds:
            line["rounds"] = [dict(r) for r in self.rounds]
        return line

    def to_lines(self) -> List[str]:
        """Serialize to JSONL lines (without trailing newlines)."""
        lines = [json.dumps(self.header(), ensure_ascii=False)]
        lines.extend(json.dumps(record.to_dict(), ensure_ascii=False) for record in self.turns)
        lines.append(json.dumps(self.terminator(), ensure_ascii=False))
        return lines


def append_turn(trace: EpisodeTrace, record: TurnRecord) -> EpisodeTrace:
    """Return a new trace with record appended; turns must be consecutive."""
    expected = trace.turns[-1].turn + 1 if trace.turns else 1
    if record.turn != expected:
        raise SequencingError(
            f"{trace.scenario_id}/{trace.method_id}: expected turn {expected}, got {record.turn}"
        )
    return replace(trace, turns=trace.turns + (record,))


def write_traces(path: str, traces: Iterable[EpisodeTrace]) -> None:
    """Write traces to one JSONL file, in the given order."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, mode="w", encoding="utf-8", newline="\n") as f:
        for trace in traces:
            for line in trace.to_lines():
                f.write(line + "\n")


def parse_traces(lines: Iterable[str]) -> List[EpisodeTrace]:
    """Rebuild traces from JSONL lines."""
    traces: List[EpisodeTrace] = []
    current: Optional[EpisodeTrace] = None
    for number, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DataError(f"line {number}: invalid JSON ({e})") from e

        if "episode" in doc:
            if current is not None:
                raise DataError(f"line {number}: episode header before previous terminator")
            header = doc["episode"]
            current = EpisodeTrace(
                scenario_id=str(header["scenario_id"]),
                method_id=str(header["method_id"]),
                seed=int(header["seed"]),
                tags=dict(header.get("tags") or {}),
            )
        elif "turn" in doc:
            if current is None:
                raise DataError(f"line {number}: turn record outside an episode")
            current = append_turn(current, TurnRecord.from_dict(doc))
        elif "success" in doc:
            if current is None:
                raise DataError(f"line {number}: terminator outside an episode")
            traces.append(current.finish(bool(doc["success"]), doc.get("metrics") or {}, doc.get("rounds") or ()))
            current = None
        else:
            raise DataError(f"line {number}: unrecognised record {sorted(doc)}")

    if current is not None:
        raise DataError(f"episode {current.scenario_id} has no terminator")
    return traces


def read_traces(path: str) -> List[EpisodeTrace]:
    with open(path, mode="r", encoding="utf-8") as f:
        return parse_traces(f)
