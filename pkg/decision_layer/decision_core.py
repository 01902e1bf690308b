"""
decision_core.py
Environment-independent decision layer: the (actions, context, decision
function) triple, a linear reward-cost utility with constrained argmax,
the generic sufficiency threshold rule, and the registry that maps rule
names to policies.

- Reward/cost evaluators and feasibility predicates are built from
  config documents by name, so routing-style demos need no code.
- decide() never mutates the context it is given.
"""

import json
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

from .errors import (
    ConfigurationError,
    DecisionLayerError,
    EvaluationError,
    NoFeasibleActionError,
    PreconditionError,
)
from .shared_types import Action, ActionKind, DecisionContext, DecisionRecord, Signal

Evaluator = Callable[[Action, DecisionContext], float]
Feasibility = Callable[[Action, DecisionContext], bool]

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@dataclass
class UtilitySpec:
    """
    Linear reward-cost utility U(a, c) = R(a, c) - sum_k lambda_k * C_k(a, c)

    Attributes:
        reward: Evaluator for R
        costs: (evaluator, weight) pairs; weights must be non-negative
        feasibility: Predicate selecting the feasible subset F(c)
    """
    reward: Evaluator
    costs: List[Tuple[Evaluator, float]] = field(default_factory=list)
    feasibility: Feasibility = lambda action, context: True

    def __post_init__(self):
        for index, (_, weight) in enumerate(self.costs):
            if weight < 0:
                raise ConfigurationError(f"cost weight must be >= 0, got {weight}", field_path=f"costs[{index}].weight")


def linear_utility(action: Action, context: DecisionContext, spec: UtilitySpec) -> float:
    """R(a, c) minus the weighted sum of costs."""
    try:
        value = float(spec.reward(action, context))
        for evaluator, weight in spec.costs:
            value -= weight * float(evaluator(action, context))
    except DecisionLayerError:
        raise
    except Exception as e:
        raise EvaluationError(f"evaluator failed on action {action.id}: {e}") from e
    return value


def utility_argmax(context: DecisionContext, actions: Sequence[Action], spec: UtilitySpec) -> Action:
    """
    Feasible action with the highest utility.

    Ties go to the lexicographically smallest action id.
    """
    if not actions:
        raise PreconditionError("utility_argmax needs at least one action")
    feasible = [action for action in actions if spec.feasibility(action, context)]
    if not feasible:
        raise NoFeasibleActionError(f"none of {[a.id for a in actions]} is feasible")
    scored = [(linear_utility(action, context, spec), action) for action in feasible]
    best = max(score for score, _ in scored)
    return min((action for score, action in scored if score == best), key=lambda a: a.id)


def threshold_rule(p_suff: Signal, tau: float) -> Action:
    """Execute once sufficiency reaches tau (inclusive), otherwise clarify."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"must be in [0, 1], got {tau}", field_path="tau")
    if p_suff.value >= tau:
        return Action.of(ActionKind.EXECUTE)
    return Action.of(ActionKind.CLARIFY)


# Evaluator and feasibility factories, addressed by name from config documents

def _payload_evaluator(params: Dict[str, Any]) -> Evaluator:
    key = params["key"]
    return lambda action, context: float(action.payload[key])


def _constant_evaluator(params: Dict[str, Any]) -> Evaluator:
    value = float(params["value"])
    return lambda action, context: value


def _counter_evaluator(params: Dict[str, Any]) -> Evaluator:
    name = params["name"]
    scale = float(params.get("scale", 1.0))
    return lambda action, context: scale * context.counters[name]


def _signal_evaluator(params: Dict[str, Any]) -> Evaluator:
    name = params["name"]
    return lambda action, context: context.value(name, 0.0)


EVALUATORS: Mapping[str, Callable[[Dict[str, Any]], Evaluator]] = MappingProxyType({
    "payload": _payload_evaluator,
    "constant": _constant_evaluator,
    "counter": _counter_evaluator,
    "signal": _signal_evaluator,
})


def _limit(params: Dict[str, Any], context: DecisionContext) -> float:
    if "counter" in params:
        return float(context.counters[params["counter"]])
    return float(params["limit"])


def _all_feasible(params: Dict[str, Any]) -> Feasibility:
    return lambda action, context: True


def _payload_at_most(params: Dict[str, Any]) -> Feasibility:
    key = params["key"]
    return lambda action, context: float(action.payload[key]) <= _limit(params, context)


def _payload_at_least(params: Dict[str, Any]) -> Feasibility:
    key = params["key"]
    return lambda action, context: float(action.payload[key]) >= _limit(params, context)


FEASIBILITY: Mapping[str, Callable[[Dict[str, Any]], Feasibility]] = MappingProxyType({
    "all": _all_feasible,
    "payload_at_most": _payload_at_most,
    "payload_at_least": _payload_at_least,
})


def _build_evaluator(doc: Dict[str, Any], path: str) -> Evaluator:
    name = doc.get("evaluator")
    if name not in EVALUATORS:
        raise ConfigurationError(f"unknown evaluator {name!r}", field_path=f"{path}.evaluator")
    try:
        return EVALUATORS[name](doc)
    except KeyError as e:
        raise ConfigurationError(f"missing parameter {e}", field_path=path) from e


def utility_spec_from_config(doc: Dict[str, Any]) -> Tuple[List[Action], UtilitySpec]:
    """
    Build the offered actions and utility spec from a config document.

    Expected shape:
        {"actions": [{"id": ..., "kind": "custom", "payload": {...}}],
         "reward": {"evaluator": "payload", "key": "quality"},
         "costs": [{"evaluator": "payload", "key": "price", "weight": 1.0}],
         "feasibility": {"predicate": "all"}}
    """
    raw_actions = doc.get("actions") or []
    if not raw_actions:
        raise ConfigurationError("at least one action is required", field_path="actions")
    actions = [
        Action(id=a["id"], kind=ActionKind(a.get("kind", "custom")), payload=dict(a.get("payload") or {}))
        for a in raw_actions
    ]
    ids = [action.id for action in actions]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate action ids in {ids}", field_path="actions")

    if "reward" not in doc:
        raise ConfigurationError("reward evaluator is required", field_path="reward")
    reward = _build_evaluator(doc["reward"], "reward")
    costs = []
    for index, cost in enumerate(doc.get("costs") or []):
        costs.append((_build_evaluator(cost, f"costs[{index}]"), float(cost.get("weight", 1.0))))

    feasibility_doc = doc.get("feasibility") or {"predicate": "all"}
    predicate = feasibility_doc.get("predicate")
    if predicate not in FEASIBILITY:
        raise ConfigurationError(f"unknown predicate {predicate!r}", field_path="feasibility.predicate")
    try:
        feasibility = FEASIBILITY[predicate](feasibility_doc)
    except KeyError as e:
        raise ConfigurationError(f"missing parameter {e}", field_path="feasibility") from e

    return actions, UtilitySpec(reward=reward, costs=costs, feasibility=feasibility)


def load_utility_demo(name: str) -> Dict[str, Any]:
    """Load one of the shipped utility demo documents (routing_demo, inference_scaling_demo)."""
    path = name if os.path.exists(name) else os.path.join(DATA_DIR, f"{name}.json")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# Rule registry

def _require(context: DecisionContext, name: str) -> Signal:
    signal = context.signals.get(name)
    if signal is None:
        raise PreconditionError(f"context has no {name} signal")
    return signal


def _threshold(params: Dict[str, Any], context: DecisionContext) -> Tuple[Tuple[Action, ...], Action]:
    offered = (Action.of(ActionKind.EXECUTE), Action.of(ActionKind.CLARIFY))
    return offered, threshold_rule(_require(context, "p_suff"), float(params.get("tau", 1.0)))


def _calendar_dc(params: Dict[str, Any], context: DecisionContext) -> Tuple[Tuple[Action, ...], Action]:
    from .calendar_env import dc_policy

    last = context.history[-1] if context.history else None
    last_action = Action.from_dict(last["action"]) if last else None
    last_valid = last.get("valid") if last else None
    chosen = dc_policy(_require(context, "p_suff").value, last_action, last_valid)
    offered = (Action.of(ActionKind.EXECUTE), Action.of(ActionKind.CLARIFY))
    return offered, chosen


def _graph_dc(params: Dict[str, Any], context: DecisionContext) -> Tuple[Tuple[Action, ...], Action]:
    from .graph_env import graph_policy

    chosen = graph_policy(
        p_suff=_require(context, "p_suff").value,
        p_corr=context.value("p_corr", 1.0),
        just_traversed=bool(context.flags.get("just_traversed", False)),
        n_untried=context.counters.get("n_untried", 0),
        n_hidden=context.counters.get("n_hidden", 0),
        turn=context.counters.get("turn", 0),
        tau_suff=float(params.get("tau_suff", 0.4)),
        theta_corr=float(params.get("theta_corr", 0.5)),
    )
    offered = tuple(Action.of(kind) for kind in (
        ActionKind.EXECUTE, ActionKind.CLARIFY, ActionKind.BACKTRACK, ActionKind.ACCEPT,
    ))
    return offered, chosen


def _retrieval_threshold(params: Dict[str, Any], context: DecisionContext) -> Tuple[Tuple[Action, ...], Action]:
    from .retrieval_env import ControllerConfig, controller_step

    config = ControllerConfig(tau=float(params.get("tau", 0.8)), alpha=float(params.get("alpha", 0.4)))
    round_index = context.counters.get("round", context.counters.get("turn", 0))
    chosen = controller_step(_require(context, "p_hat").value, round_index, config)
    offered = (Action.of(ActionKind.STOP), Action.of(ActionKind.EXPAND))
    return offered, chosen


def _utility_argmax(params: Dict[str, Any], context: DecisionContext) -> Tuple[Tuple[Action, ...], Action]:
    actions, spec = utility_spec_from_config(params)
    return tuple(actions), utility_argmax(context, actions, spec)


@dataclass(frozen=True)
class RuleEntry:
    fn: Callable[[Dict[str, Any], DecisionContext], Tuple[Tuple[Action, ...], Action]]
    description: str


RULES: Mapping[str, RuleEntry] = MappingProxyType({
    "threshold": RuleEntry(_threshold, "Execute when p_suff >= tau, else clarify."),
    "calendar_dc": RuleEntry(_calendar_dc, "Three-branch calendar rule with no-blind-retry."),
    "graph_dc": RuleEntry(_graph_dc, "Joint p_suff/p_corr rule for graph disambiguation."),
    "retrieval_threshold": RuleEntry(_retrieval_threshold, "Stop when p_hat >= tau or at budget, else expand."),
    "utility_argmax": RuleEntry(_utility_argmax, "Constrained argmax of a linear reward-cost utility."),
})


def decide(rule_id: str, params: Dict[str, Any], context: DecisionContext) -> DecisionRecord:
    """Run a registered rule and record what it saw, offered and chose."""
    entry = RULES.get(rule_id)
    if entry is None:
        raise ConfigurationError(f"unknown rule {rule_id!r}; registered: {sorted(RULES)}", field_path="rule_id")
    snapshot = context.snapshot()
    offered, chosen = entry.fn(dict(params), context)
    return DecisionRecord(context=snapshot, offered=offered, chosen=chosen, rule_id=rule_id, params=dict(params))
