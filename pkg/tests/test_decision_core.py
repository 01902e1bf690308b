import pytest

from decision_layer.decision_core import (
    RULES,
    UtilitySpec,
    decide,
    linear_utility,
    load_utility_demo,
    threshold_rule,
    utility_argmax,
    utility_spec_from_config,
)
from decision_layer.errors import (
    ConfigurationError,
    EvaluationError,
    InconsistentStateError,
    NoFeasibleActionError,
    PreconditionError,
)
from decision_layer.shared_types import Action, ActionKind, DecisionContext, DecisionRecord, Signal


def _ctx(**signals):
    return DecisionContext(signals={name: Signal(name, value) for name, value in signals.items()})


def test_threshold_rule_is_inclusive():
    assert threshold_rule(Signal("p_suff", 0.75), 0.75).kind == ActionKind.EXECUTE
    assert threshold_rule(Signal("p_suff", 0.74), 0.75).kind == ActionKind.CLARIFY
    assert threshold_rule(Signal("p_suff", 1.0), 1.0).kind == ActionKind.EXECUTE


def test_threshold_rule_rejects_tau_out_of_range():
    with pytest.raises(ConfigurationError) as err:
        threshold_rule(Signal("p_suff", 0.5), 1.5)
    assert err.value.field_path == "tau"


def test_routing_demo_prefers_cheaper_model():
    actions, spec = utility_spec_from_config(load_utility_demo("routing_demo"))
    chosen = utility_argmax(DecisionContext(), actions, spec)
    # 0.6 - 0.1 beats 0.9 - 0.5
    assert chosen.id == "model_small"
    assert linear_utility(actions[0], DecisionContext(), spec) == pytest.approx(0.4)


def test_routing_demo_flips_with_lower_price_weight():
    doc = load_utility_demo("routing_demo")
    doc["costs"][0]["weight"] = 0.2
    actions, spec = utility_spec_from_config(doc)
    assert utility_argmax(DecisionContext(), actions, spec).id == "model_large"


@pytest.mark.parametrize("budget,expected", [(16, "samples_04"), (4, "samples_04"), (2, "samples_01")])
def test_inference_scaling_respects_compute_budget(budget, expected):
    actions, spec = utility_spec_from_config(load_utility_demo("inference_scaling_demo"))
    context = DecisionContext(counters={"compute_budget": budget})
    assert utility_argmax(context, actions, spec).id == expected


def test_no_feasible_action():
    actions, spec = utility_spec_from_config(load_utility_demo("inference_scaling_demo"))
    with pytest.raises(NoFeasibleActionError):
        utility_argmax(DecisionContext(counters={"compute_budget": 0}), actions, spec)


def test_argmax_ties_go_to_smallest_id():
    actions = [Action("b", ActionKind.CUSTOM, {"q": 1.0}), Action("a", ActionKind.CUSTOM, {"q": 1.0})]
    spec = UtilitySpec(reward=lambda action, context: action.payload["q"])
    assert utility_argmax(DecisionContext(), actions, spec).id == "a"


def test_argmax_needs_actions():
    with pytest.raises(PreconditionError):
        utility_argmax(DecisionContext(), [], UtilitySpec(reward=lambda a, c: 0.0))


def test_failing_evaluator_becomes_evaluation_error():
    spec = UtilitySpec(reward=lambda action, context: action.payload["missing"])
    with pytest.raises(EvaluationError):
        linear_utility(Action.of(ActionKind.CUSTOM), DecisionContext(), spec)


def test_negative_cost_weight_rejected():
    with pytest.raises(ConfigurationError):
        UtilitySpec(reward=lambda a, c: 0.0, costs=[(lambda a, c: 1.0, -1.0)])


def test_unknown_evaluator_names_field():
    doc = load_utility_demo("routing_demo")
    doc["reward"] = {"evaluator": "nope"}
    with pytest.raises(ConfigurationError) as err:
        utility_spec_from_config(doc)
    assert err.value.field_path == "reward.evaluator"


def test_rule_registry_is_read_only():
    assert set(RULES) == {"threshold", "calendar_dc", "graph_dc", "retrieval_threshold", "utility_argmax"}
    with pytest.raises(TypeError):
        RULES["other"] = RULES["threshold"]


def test_decide_records_context_and_choice():
    context = _ctx(p_suff=0.5)
    record = decide("threshold", {"tau": 0.4}, context)
    assert isinstance(record, DecisionRecord)
    assert record.chosen.kind == ActionKind.EXECUTE
    assert record.context["signals"] == {"p_suff": 0.5}
    assert record.chosen.id in {a.id for a in record.offered}


def test_decide_unknown_rule():
    with pytest.raises(ConfigurationError):
        decide("missing", {}, _ctx(p_suff=0.5))


def test_decide_graph_rule_routes_through_policy():
    context = DecisionContext(
        signals={"p_suff": Signal("p_suff", 0.2), "p_corr": Signal("p_corr", 0.9)},
        flags={"just_traversed": True},
        counters={"n_untried": 2, "n_hidden": 1},
    )
    assert decide("graph_dc", {}, context).chosen.kind == ActionKind.ACCEPT


def test_decide_retrieval_rule_forces_stop_at_budget():
    context = DecisionContext(signals={"p_hat": Signal("p_hat", 0.1)}, counters={"round": 2})
    assert decide("retrieval_threshold", {"tau": 0.8}, context).chosen.kind == ActionKind.STOP
    context = DecisionContext(signals={"p_hat": Signal("p_hat", 0.1)}, counters={"round": 0})
    assert decide("retrieval_threshold", {"tau": 0.8}, context).chosen.kind == ActionKind.EXPAND


def test_decide_calendar_rule_no_blind_retry():
    failed = {"action": Action.of(ActionKind.EXECUTE).to_dict(), "valid": False}
    context = DecisionContext(signals={"p_suff": Signal("p_suff", 1.0)}, history=[failed])
    assert decide("calendar_dc", {}, context).chosen.kind == ActionKind.CLARIFY


def test_decide_utility_rule_from_params():
    record = decide("utility_argmax", load_utility_demo("routing_demo"), DecisionContext())
    assert record.chosen.id == "model_small"
    assert [a.id for a in record.offered] == ["model_large", "model_small"]


def test_context_turn_must_match_history():
    with pytest.raises(InconsistentStateError):
        DecisionContext(counters={"turn": 2}, history=[{}])
    with pytest.raises(InconsistentStateError):
        DecisionContext(counters={"turn": 1, "budget": 0}, history=[{}])


def test_action_payload_schema():
    Action.of(ActionKind.CLARIFY, attribute="location")
    with pytest.raises(PreconditionError):
        Action.of(ActionKind.STOP, node_id=3)
    assert Action.from_dict(Action.of(ActionKind.EXPAND, k=6).to_dict()) == Action.of(ActionKind.EXPAND, k=6)
