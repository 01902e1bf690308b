"""
attribution.py
Offline replay of threshold controllers and failure attribution from saved traces.

- Replay only reads the per-round table stored with each retrieval trace; retrieval
  is never re-run.
- Calendar attribution walks the logged turns in a fixed cascade:
  signal estimation -> decision policy -> question generation -> execution.
"""

from collections import Counter
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .errors import IncompleteTraceError, PreconditionError
from .shared_types import Action, ActionKind, AttributionCategory, AttributionLabel
from .signal_kit import composite_value
from .trace_log import EpisodeTrace


def _round_table(trace: EpisodeTrace) -> Tuple[List[Dict[str, Any]], int]:
    rounds = list(trace.rounds)
    if not rounds:
        raise IncompleteTraceError(f"{trace.scenario_id}/{trace.method_id}: no per-round signals")
    budget = int(trace.tags.get("budget", len(rounds) - 1))
    if len(rounds) < budget + 1:
        raise IncompleteTraceError(
            f"{trace.scenario_id}: {len(rounds)} rounds recorded, {budget + 1} needed for replay"
        )
    for r, row in enumerate(rounds[:budget + 1]):
        missing = {"p_dense", "p_llm", "gold_present"} - set(row)
        if missing:
            raise IncompleteTraceError(f"{trace.scenario_id} round {r}: missing {sorted(missing)}")
    return rounds, budget


def replay_threshold_controller(trace: EpisodeTrace, tau: float, alpha: float) -> Dict[str, Any]:
    """
    Re-decide stop/expand from the stored per-round signals.

    Returns {"success", "rounds", "actions"}; rounds is the stop round index.
    """
    rounds, budget = _round_table(trace)
    actions: List[str] = []
    for r in range(budget + 1):
        row = rounds[r]
        p_hat = composite_value(float(row["p_dense"]), float(row["p_llm"]), alpha)
        if p_hat >= tau or r == budget:
            actions.append(ActionKind.STOP.value)
            return {"success": bool(row["gold_present"]), "rounds": r, "actions": actions}
        actions.append(ActionKind.EXPAND.value)
    # unreachable: the budget round always stops
    raise IncompleteTraceError(f"{trace.scenario_id}: replay did not stop")


def attribute_retrieval_failure(trace: EpisodeTrace, tau: float, alpha: Optional[float] = None) -> AttributionLabel:
    """
    Blame a failed retrieval episode on an early stop or on a corpus gap.

    The stop round is found by replay at (tau, alpha); alpha defaults to the
    value recorded with the trace.
    """
    if alpha is None:
        alpha = float(trace.tags.get("alpha", 0.4))
    result = replay_threshold_controller(trace, tau, alpha)
    if result["success"]:
        raise PreconditionError(f"{trace.scenario_id}: episode succeeds at tau={tau}, alpha={alpha}")

    rounds, budget = _round_table(trace)
    stop = result["rounds"]
    row = rounds[stop]
    turn = stop + 1
    if stop == budget and not any(bool(r["gold_present"]) for r in rounds[:budget + 1]):
        evidence = tuple((r + 1, "gold_present", False) for r in range(budget + 1))
        return AttributionLabel(AttributionCategory.CORPUS_GAP, evidence)

    dense_high = float(row["p_dense"]) >= tau
    llm_high = float(row["p_llm"]) >= tau
    evidence = ((turn, "p_dense", row["p_dense"]), (turn, "p_llm", row["p_llm"]))
    if dense_high and llm_high:
        category = AttributionCategory.EARLY_STOP_BOTH
    elif dense_high:
        category = AttributionCategory.EARLY_STOP_DENSE
    elif llm_high:
        category = AttributionCategory.EARLY_STOP_LLM
    else:
        # Neither component alone reaches tau; blame the larger one
        category = (
            AttributionCategory.EARLY_STOP_DENSE
            if float(row["p_dense"]) >= float(row["p_llm"])
            else AttributionCategory.EARLY_STOP_LLM
        )
    return AttributionLabel(category, evidence)


def attribute_calendar_failure(trace: EpisodeTrace, scenario) -> AttributionLabel:
    """
    Point at the component that broke a failed calendar episode.

    The conversation is rebuilt from the scenario and the logged answers, and the
    oracle extractor gives the ground-truth report for every turn.
    """
    from .calendar_env import ExtractorReport, Utterance, dc_policy, oracle_extract

    if trace.success:
        raise PreconditionError(f"{trace.scenario_id}: episode succeeded, nothing to attribute")
    if not trace.turns:
        raise PreconditionError(f"{trace.scenario_id}: trace has no turns")

    conversation = [Utterance("user", scenario.initial_query, scenario.initial_values())]
    truth = ExtractorReport()
    truths = []
    for record in trace.turns:
        truth = oracle_extract(conversation, scenario, prior=truth)
        truths.append(truth)
        obs = record.observations
        if record.action.kind == ActionKind.CLARIFY and "answer" in obs:
            conversation.append(Utterance("assistant", obs.get("question", "")))
            conversation.append(Utterance("user", obs["answer"], dict(obs.get("answer_values") or {})))

    # 1. estimator: logged report vs fields actually present
    for record, truth in zip(trace.turns, truths):
        logged = record.observations.get("report")
        if logged is None:
            continue
        expected = truth.to_dict()
        wrong = [name for name in expected if bool(logged.get(name)) != expected[name]]
        if wrong:
            evidence = tuple((record.turn, f"report.{name}", logged.get(name)) for name in wrong)
            return AttributionLabel(AttributionCategory.SIGNAL_ESTIMATION, evidence)

    # 2. policy: chosen action vs the rule on the logged signal
    last_action: Optional[Action] = None
    last_valid: Optional[bool] = None
    for record, truth in zip(trace.turns, truths):
        p_suff = record.signals.get("p_suff", truth.p_suff)
        expected_kind = dc_policy(p_suff, last_action, last_valid).kind
        if expected_kind != record.action.kind:
            evidence = ((record.turn, "action", record.action.kind.value), (record.turn, "p_suff", p_suff))
            return AttributionLabel(AttributionCategory.DECISION_POLICY, evidence)
        last_action, last_valid = record.action, record.valid

    # 3. question generator: asked about something not missing
    for record in trace.turns:
        obs = record.observations
        if record.action.kind != ActionKind.CLARIFY or "targets" not in obs:
            continue
        stray = [name for name in obs["targets"] if name not in set(obs.get("missing") or [])]
        if stray:
            evidence = ((record.turn, "targets", list(obs["targets"])), (record.turn, "missing", list(obs.get("missing") or [])))
            return AttributionLabel(AttributionCategory.QUESTION_GENERATION, evidence)

    last = trace.turns[-1]
    return AttributionLabel(AttributionCategory.EXECUTION, ((last.turn, "event", last.observations.get("event")),))


def summarize_labels(labels: Iterable[AttributionLabel]) -> Dict[str, int]:
    """Count per category, in category declaration order, zeros omitted."""
    counts = Counter(label.category for label in labels)
    return {category.value: counts[category] for category in AttributionCategory if counts[category]}
