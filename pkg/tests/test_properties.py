from functools import lru_cache

from hypothesis import given, settings
from hypothesis import strategies as st

from decision_layer.calendar_env import generate_scenarios, run_calendar_episode
from decision_layer.decision_core import UtilitySpec, decide, threshold_rule, utility_argmax
from decision_layer.graph_env import (
    P_CORR_CEILING,
    P_CORR_FLOOR,
    generate_graph,
    initial_state,
    load_scenarios,
    run_graph_episode,
)
from decision_layer.retrieval_env import ControllerConfig, controller_step
from decision_layer.shared_types import Action, ActionKind, DecisionContext, Signal
from decision_layer.signal_kit import NoiseSpec, blend_composite, composite_value

CALENDAR_SCENARIOS = generate_scenarios()
GRAPH_SCENARIOS = load_scenarios()

unit = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@lru_cache(maxsize=None)
def _graph(seed: int):
    return generate_graph(n=60, seed=seed)


@settings(max_examples=1000, deadline=None)
@given(
    scenario=st.sampled_from(CALENDAR_SCENARIOS),
    seed=st.integers(min_value=0, max_value=2**16),
    fn=unit,
    fp=unit,
    mode=st.sampled_from(["targeted", "drifting"]),
    drift=unit,
    T=st.integers(min_value=1, max_value=8),
)
def test_calendar_never_retries_blind(scenario, seed, fn, fp, mode, drift, T):
    noise = NoiseSpec(false_negative_rate=fn, false_positive_rate=fp, seed=seed)
    trace = run_calendar_episode("dc", scenario, T=T, seed=seed, mode=mode, drift_rate=drift, noise=noise)
    records = list(trace.turns)
    assert len(records) <= T
    for record, following in zip(records, records[1:]):
        if record.action.kind == ActionKind.EXECUTE and not record.valid:
            assert following.action.kind == ActionKind.CLARIFY
    if trace.success:
        assert records[-1].action.kind == ActionKind.EXECUTE and records[-1].valid
    # confirmed fields stay locked, so sufficiency never drops within an episode
    p_suff = [record.signals["p_suff"] for record in records]
    assert p_suff == sorted(p_suff)


@settings(max_examples=1000, deadline=None)
@given(
    scenario=st.sampled_from(CALENDAR_SCENARIOS),
    seed=st.integers(min_value=0, max_value=2**16),
    fn=st.floats(min_value=0.0, max_value=0.99, allow_nan=False),
    mode=st.sampled_from(["targeted", "drifting"]),
    drift=unit,
    T=st.integers(min_value=1, max_value=8),
)
def test_calendar_misses_never_cause_bad_execution(scenario, seed, fn, mode, drift, T):
    noise = NoiseSpec(false_negative_rate=fn, false_positive_rate=0.0, seed=seed)
    trace = run_calendar_episode("dc", scenario, T=T, seed=seed, mode=mode, drift_rate=drift, noise=noise)
    executions = [record for record in trace.turns if record.action.kind == ActionKind.EXECUTE]
    assert all(record.valid for record in executions)
    if executions:
        assert trace.success and trace.last_turn == executions[-1]


@settings(max_examples=1000, deadline=None)
@given(
    scenario=st.sampled_from(GRAPH_SCENARIOS),
    graph_seed=st.integers(min_value=0, max_value=15),
    method=st.sampled_from(["dc", "retry"]),
    tau_suff=unit,
    theta_corr=unit,
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_graph_beliefs_stay_in_range(scenario, graph_seed, method, tau_suff, theta_corr, seed):
    graph = _graph(graph_seed)
    pool = initial_state(graph, scenario).candidates
    trace = run_graph_episode(method, scenario, graph, seed=seed, tau_suff=tau_suff, theta_corr=theta_corr)
    visited = [record.observations["visited"] for record in trace.turns if "visited" in record.observations]
    assert len(visited) == len(set(visited))
    assert set(visited) <= pool
    for record in trace.turns:
        if "p_corr" in record.observations:
            assert method == "dc"
            assert P_CORR_FLOOR <= record.observations["p_corr"] <= P_CORR_CEILING
        assert not record.observations.get("target_eliminated", False)
    assert trace.metrics["turns"] <= scenario.budget
    if trace.success:
        last = trace.turns[-1]
        assert last.action.kind == ActionKind.ACCEPT and last.action.payload["node_id"] == scenario.target
    if method == "dc":
        p_suff = [record.signals["p_suff"] for record in trace.turns]
        assert p_suff == sorted(p_suff)
        assert all(0.0 < p <= 1.0 for p in p_suff)


@settings(max_examples=1000, deadline=None)
@given(p=unit, tau=unit)
def test_decisions_are_deterministic(p, tau):
    context = DecisionContext(signals={"p_suff": Signal("p_suff", p)})
    first = decide("threshold", {"tau": tau}, context)
    second = decide("threshold", {"tau": tau}, context)
    assert first.chosen == second.chosen
    expected = ActionKind.EXECUTE if p >= tau else ActionKind.CLARIFY
    assert threshold_rule(Signal("p_suff", p), tau).kind == expected


@settings(max_examples=1000, deadline=None)
@given(dense=unit, llm=unit, alpha=unit)
def test_composite_lies_between_components(dense, llm, alpha):
    value = blend_composite(Signal("p_dense", dense), Signal("p_llm", llm), alpha).value
    assert min(dense, llm) <= value <= max(dense, llm)


@settings(max_examples=1000, deadline=None)
@given(p=unit, alpha=unit)
def test_composite_of_equal_components_is_exact(p, alpha):
    assert composite_value(p, p, alpha) == p


@settings(max_examples=1000, deadline=None)
@given(
    p=unit,
    alpha=st.sampled_from([0.2, 0.3, 0.4, 0.5, 0.6]),
    tau=st.sampled_from([0.5, 0.6, 0.7, 0.8, 0.9]),
)
def test_controller_stops_when_both_signals_reach_tau(p, alpha, tau):
    assert controller_step(composite_value(tau, tau, alpha), 0, ControllerConfig(tau=tau, alpha=alpha)).kind == ActionKind.STOP
    if p >= tau:
        assert controller_step(composite_value(p, p, alpha), 0, ControllerConfig(tau=tau, alpha=alpha)).kind == ActionKind.STOP


@settings(max_examples=1000, deadline=None)
@given(
    options=st.lists(
        st.tuples(st.integers(min_value=0, max_value=20), st.integers(min_value=0, max_value=20)),
        min_size=1, max_size=6,
    ),
    weight=st.integers(min_value=0, max_value=4),
    exponent=st.integers(min_value=0, max_value=10),
)
def test_argmax_ignores_positive_rescaling(options, weight, exponent):
    actions = [Action(f"a{i}", ActionKind.CUSTOM, {"q": q, "c": c}) for i, (q, c) in enumerate(options)]
    scale = float(2 ** exponent)

    def spec(factor):
        return UtilitySpec(
            reward=lambda action, context: factor * action.payload["q"],
            costs=[(lambda action, context: action.payload["c"], factor * weight)],
        )

    context = DecisionContext()
    assert utility_argmax(context, actions, spec(1.0)).id == utility_argmax(context, actions, spec(scale)).id
