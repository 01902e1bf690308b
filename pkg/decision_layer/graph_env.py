"""
graph_env.py
Disambiguation over a synthetic organisation graph.

- generate_graph(): pinned scenario nodes first, then seeded filler nodes;
  base edges join people sharing >= 2 attributes, plus 15% noisy edges between
  people sharing <= 1.
- Scenarios S1-S5 give some known attributes of a target person. The system
  can clarify (learn one hidden attribute of the target), execute/backtrack
  (visit a candidate) or accept the last visited candidate.
- p_suff = 1 / |candidates|; p_corr is a structural estimate of whether the
  visited candidate is the target, penalised when it resembles earlier rejections.
- Rejecting a candidate eliminates untried candidates with the same observed hidden profile.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import GraphGenerationError, InconsistentStateError, PreconditionError
from .shared_types import Action, ActionKind
from .trace_log import EpisodeTrace, TurnRecord, append_turn

logger = logging.getLogger(__name__)

# Configurations

ATTRIBUTE_VALUES: Dict[str, Tuple[str, ...]] = {
    "department": ("Engineering", "Marketing", "Sales", "Finance"),
    "role": ("Manager", "Analyst", "Engineer", "Lead"),
    "location": ("New York", "London", "Tokyo", "Berlin"),
    "project": ("Alpha", "Beta", "Gamma", "Delta"),
    "level": ("L1", "L2", "L3", "L4"),
}
ATTRIBUTES: Tuple[str, ...] = tuple(ATTRIBUTE_VALUES)

NOISY_EDGE_FRACTION = 0.15
P_CORR_FLOOR = 0.05
P_CORR_CEILING = 0.95
PENALTY_BASE = 0.15      # penalty at overlap 0
PENALTY_SLOPE = 0.20     # extra penalty per unit of overlap
PENALTY_MIN_OVERLAP = 0.5

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
FIXTURE_PATH = os.path.join(DATA_DIR, "graph_fixtures.json")


@dataclass(frozen=True)
class PersonNode:
    """
    A person in the organisation graph

    Attributes:
        id: Node id (pinned fixture nodes first, then filler)
        department, role, location, project, level: One of the four values each
        label: Display name for fixture nodes
    """
    id: int
    department: str
    role: str
    location: str
    project: str
    level: str
    label: Optional[str] = None

    def __post_init__(self):
        for name, values in ATTRIBUTE_VALUES.items():
            if getattr(self, name) not in values:
                raise PreconditionError(f"node {self.id}: {name}={getattr(self, name)!r} not in {values}")

    def attr(self, name: str) -> str:
        return getattr(self, name)

    def profile(self, names: Sequence[str]) -> Dict[str, str]:
        return {name: self.attr(name) for name in names}

    def matches(self, known: Dict[str, str]) -> bool:
        return all(self.attr(name) == value for name, value in known.items())

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"id": self.id, "label": self.label}
        data.update(self.profile(ATTRIBUTES))
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PersonNode":
        return cls(id=int(data["id"]), label=data.get("label"), **{name: data[name] for name in ATTRIBUTES})


def shared_attributes(a: PersonNode, b: PersonNode) -> int:
    return sum(1 for name in ATTRIBUTES if a.attr(name) == b.attr(name))


@dataclass(frozen=True)
class OrgGraph:
    """
    Attributes:
        nodes: Nodes indexed by id
        edges: Unordered pairs (low id, high id)
        seed: Generation seed
        base_edge_count: Number of >=2-shared edges
        noisy_edges: The sampled <=1-shared edges
    """
    nodes: Tuple[PersonNode, ...]
    edges: FrozenSet[Tuple[int, int]]
    seed: int
    base_edge_count: int = 0
    noisy_edges: FrozenSet[Tuple[int, int]] = frozenset()

    def node(self, node_id: int) -> PersonNode:
        return self.nodes[node_id]

    def candidates(self, known: Dict[str, str]) -> Set[int]:
        return {node.id for node in self.nodes if node.matches(known)}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "nodes": [node.to_dict() for node in self.nodes],
            "edges": sorted([list(edge) for edge in self.edges]),
            "base_edge_count": self.base_edge_count,
            "noisy_edge_count": len(self.noisy_edges),
        }


@dataclass(frozen=True)
class GraphScenario:
    """
    Attributes:
        id: S1..S5
        known: Attributes the query gives
        target: Node id of the intended person
        forced_first_visit: Decoy visited before anything else, if any
        budget: Turn budget T
        description: One-line summary
    """
    id: str
    known: Dict[str, str]
    target: int
    forced_first_visit: Optional[int] = None
    budget: int = 5
    description: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "description": self.description,
            "known": dict(self.known),
            "target": self.target,
            "forced_first_visit": self.forced_first_visit,
            "budget": self.budget,
        }


@dataclass
class SearchState:
    """
    Per-episode search state

    Attributes:
        known: attribute -> value learned so far
        hidden: Attributes not yet known, in canonical order
        candidates: Ids matching known, minus rejected/eliminated
        untried: Candidates not visited yet
        rejected: (id, hidden profile at rejection time) per rejected visit
        last_visited: Most recent visited id
        turn: Turns used
        budget: Turn budget
    """
    known: Dict[str, str]
    hidden: List[str]
    candidates: Set[int]
    untried: Set[int]
    rejected: List[Tuple[int, Dict[str, str]]] = field(default_factory=list)
    last_visited: Optional[int] = None
    turn: int = 0
    budget: int = 5

    def __post_init__(self):
        if not self.untried <= self.candidates:
            raise InconsistentStateError("untried must be a subset of candidates")
        if set(self.hidden) & set(self.known):
            raise InconsistentStateError("an attribute cannot be both known and hidden")

    def copy(self) -> "SearchState":
        return replace(
            self,
            known=dict(self.known),
            hidden=list(self.hidden),
            candidates=set(self.candidates),
            untried=set(self.untried),
            rejected=list(self.rejected),
        )


def load_fixtures(path: str = FIXTURE_PATH) -> Tuple[List[PersonNode], List[GraphScenario]]:
    """Pinned nodes and scenarios from the fixture document."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    nodes = [PersonNode.from_dict(item) for item in doc["nodes"]]
    for expected, node in enumerate(nodes):
        if node.id != expected:
            raise GraphGenerationError(f"pinned node ids must be 0..{len(nodes) - 1} in order, got {node.id}")
    scenarios = [
        GraphScenario(
            id=item["id"],
            known=dict(item["known"]),
            target=int(item["target"]),
            forced_first_visit=item.get("forced_first_visit"),
            budget=int(item.get("budget", 5)),
            description=item.get("description", ""),
        )
        for item in doc["scenarios"]
    ]
    return nodes, scenarios


def load_scenarios(path: str = FIXTURE_PATH) -> List[GraphScenario]:
    return load_fixtures(path)[1]


def scenario_by_id(scenario_id: str, path: str = FIXTURE_PATH) -> GraphScenario:
    for scenario in load_scenarios(path):
        if scenario.id == scenario_id:
            return scenario
    raise PreconditionError(f"unknown graph scenario {scenario_id!r}")


def noisy_edge_count(base_count: int) -> int:
    return math.floor(NOISY_EDGE_FRACTION * base_count)


def _shared_matrix(nodes: Sequence[PersonNode]) -> np.ndarray:
    codes = np.array(
        [[ATTRIBUTE_VALUES[name].index(node.attr(name)) for name in ATTRIBUTES] for node in nodes],
        dtype=np.int8,
    ).reshape(len(nodes), len(ATTRIBUTES))
    return (codes[:, None, :] == codes[None, :, :]).sum(axis=2)


def base_edges(nodes: Sequence[PersonNode]) -> List[Tuple[int, int]]:
    """Pairs sharing at least two attribute values, ascending."""
    shared = _shared_matrix(nodes)
    rows, cols = np.triu_indices(len(nodes), k=1)
    mask = shared[rows, cols] >= 2
    return [(nodes[i].id, nodes[j].id) for i, j in zip(rows[mask], cols[mask])]


def sample_noisy_edges(
    nodes: Sequence[PersonNode],
    base_count: int,
    rng: np.random.Generator,
) -> List[Tuple[int, int]]:
    """floor(0.15 * base_count) pairs sharing at most one attribute, without replacement."""
    shared = _shared_matrix(nodes)
    rows, cols = np.triu_indices(len(nodes), k=1)
    mask = shared[rows, cols] <= 1
    pool = [(nodes[i].id, nodes[j].id) for i, j in zip(rows[mask], cols[mask])]
    wanted = noisy_edge_count(base_count)
    if wanted > len(pool):
        raise GraphGenerationError(f"need {wanted} noisy edges but only {len(pool)} pairs share <= 1 attribute")
    if wanted == 0:
        return []
    picks = rng.choice(len(pool), size=wanted, replace=False)
    return sorted(pool[int(i)] for i in picks)


def generate_graph(n: int = 200, seed: int = 0, fixture_path: str = FIXTURE_PATH) -> OrgGraph:
    """
    Pinned fixture nodes plus seeded filler up to n nodes, with base and noisy edges.

    Raises:
        GraphGenerationError: n below the pinned node count, or too few low-overlap pairs
    """
    pinned, scenarios = load_fixtures(fixture_path)
    if n < max(10, len(pinned)):
        raise GraphGenerationError(f"n={n} is below the {len(pinned)} pinned fixture nodes")

    rng = np.random.default_rng(seed)
    nodes = list(pinned)
    while len(nodes) < n:
        draw = rng.integers(0, 4, size=len(ATTRIBUTES))
        values = {name: ATTRIBUTE_VALUES[name][int(code)] for name, code in zip(ATTRIBUTES, draw)}
        candidate = PersonNode(id=len(nodes), **values)
        # Filler must never join a scenario's candidate pool
        if any(candidate.matches(scenario.known) for scenario in scenarios):
            continue
        nodes.append(candidate)

    base = base_edges(nodes)
    noisy = sample_noisy_edges(nodes, len(base), rng)
    logger.debug("[Graph] n=%d base=%d noisy=%d", n, len(base), len(noisy))
    return OrgGraph(
        nodes=tuple(nodes),
        edges=frozenset(base) | frozenset(noisy),
        seed=seed,
        base_edge_count=len(base),
        noisy_edges=frozenset(noisy),
    )


def initial_state(graph: OrgGraph, scenario: GraphScenario) -> SearchState:
    candidates = graph.candidates(scenario.known)
    if scenario.target not in candidates:
        raise InconsistentStateError(f"{scenario.id}: target {scenario.target} does not match the known attributes")
    if scenario.forced_first_visit is not None and scenario.forced_first_visit not in candidates:
        raise InconsistentStateError(f"{scenario.id}: forced visit {scenario.forced_first_visit} is not a candidate")
    return SearchState(
        known=dict(scenario.known),
        hidden=[name for name in ATTRIBUTES if name not in scenario.known],
        candidates=set(candidates),
        untried=set(candidates),
        budget=scenario.budget,
    )


def compute_p_suff(state: SearchState) -> float:
    if not state.candidates:
        raise InconsistentStateError("candidate set is empty")
    return 1.0 / len(state.candidates)


def estimate_p_corr(visited: PersonNode, state: SearchState, graph: OrgGraph) -> float:
    """
    Structural correctness of a just-visited candidate.

    Mean over hidden attributes of the share of active peers (candidates other than
    visited and rejected) with visited's value, minus a penalty when visited resembles
    a rejected profile on at least half the hidden attributes, clamped to [0.05, 0.95].
    """
    rejected_ids = {node_id for node_id, _ in state.rejected}
    peers = [graph.node(i) for i in sorted(state.candidates - rejected_ids - {visited.id})]
    if not peers or not state.hidden:
        score = 1.0
    else:
        fractions = [
            sum(1 for peer in peers if peer.attr(name) == visited.attr(name)) / len(peers)
            for name in state.hidden
        ]
        score = float(np.mean(fractions))

    penalty = 0.0
    if state.hidden:
        for _, profile in state.rejected:
            compared = [name for name in state.hidden if name in profile]
            if not compared:
                continue
            overlap = sum(1 for name in compared if profile[name] == visited.attr(name)) / len(state.hidden)
            if overlap >= PENALTY_MIN_OVERLAP:
                penalty = max(penalty, PENALTY_BASE + PENALTY_SLOPE * overlap)

    return min(P_CORR_CEILING, max(P_CORR_FLOOR, score - penalty))


def eliminate_candidates(state: SearchState, rejected: PersonNode, graph: OrgGraph) -> Tuple[SearchState, List[int]]:
    """
    Drop a rejected node, and every untried candidate sharing its observed hidden profile.

    Returns the new state and the ids eliminated besides rejected itself.
    """
    new = state.copy()
    profile = rejected.profile(new.hidden)
    new.candidates.discard(rejected.id)
    new.untried.discard(rejected.id)
    eliminated: List[int] = []
    if profile:
        eliminated = sorted(
            node_id for node_id in new.untried
            if all(graph.node(node_id).attr(name) == value for name, value in profile.items())
        )
    for node_id in eliminated:
        new.candidates.discard(node_id)
        new.untried.discard(node_id)
    new.rejected.append((rejected.id, profile))
    return new, eliminated


def graph_policy(
    p_suff: float,
    p_corr: float,
    just_traversed: bool,
    n_untried: int,
    n_hidden: int,
    turn: int,
    tau_suff: float = 0.4,
    theta_corr: float = 0.5,
) -> Action:
    """
    Joint-belief rule.

    After a traversal: accept if p_corr >= theta_corr or nothing is left to try;
    clarify if p_suff < tau_suff past turn 2; backtrack while untried remain; else clarify.
    Before any traversal: execute once p_suff >= tau_suff or at most one attribute is hidden; else clarify.
    """
    if just_traversed:
        if p_corr >= theta_corr:
            return Action.of(ActionKind.ACCEPT)
        if n_untried == 0:
            return Action.of(ActionKind.ACCEPT)
        if p_suff < tau_suff and turn > 2:
            return Action.of(ActionKind.CLARIFY)
        if n_untried > 0:
            return Action.of(ActionKind.BACKTRACK)
        return Action.of(ActionKind.CLARIFY)
    if p_suff >= tau_suff:
        return Action.of(ActionKind.EXECUTE)
    if n_hidden <= 1:
        return Action.of(ActionKind.EXECUTE)
    return Action.of(ActionKind.CLARIFY)


def choose_clarify_attribute(state: SearchState, graph: OrgGraph) -> Optional[str]:
    """Hidden attribute with the smallest expected remaining candidate count; ties alphabetical."""
    best: Optional[str] = None
    best_score: Optional[int] = None
    for name in sorted(state.hidden):
        counts: Dict[str, int] = {}
        for node_id in state.candidates:
            value = graph.node(node_id).attr(name)
            counts[value] = counts.get(value, 0) + 1
        # sum(n_v^2) / n ranks the same as sum(n_v^2) for a fixed candidate set
        score = sum(c * c for c in counts.values())
        if best_score is None or score < best_score:
            best, best_score = name, score
    return best


def _next_visit(state: SearchState, scenario: GraphScenario, order: Optional[List[int]] = None) -> Optional[int]:
    forced = scenario.forced_first_visit
    if forced is not None and forced in state.untried and not state.rejected and state.last_visited is None:
        return forced
    if order is not None:
        return next((node_id for node_id in order if node_id in state.untried), None)
    return min(state.untried) if state.untried else None


def _visit(
    state: SearchState,
    node_id: int,
    scenario: GraphScenario,
    graph: OrgGraph,
    informed: bool = True,
) -> Tuple[SearchState, Dict[str, Any]]:
    # Uninformed (retry) visits neither estimate p_corr nor eliminate
    node = graph.node(node_id)
    correct = node_id == scenario.target
    observations: Dict[str, Any] = {"visited": node_id, "profile": node.profile(ATTRIBUTES), "correct": correct}
    if informed:
        observations["p_corr"] = P_CORR_CEILING if correct else estimate_p_corr(node, state, graph)

    new = state.copy()
    new.last_visited = node_id
    new.untried.discard(node_id)
    if not correct and informed:
        new, eliminated = eliminate_candidates(new, node, graph)
        observations["eliminated"] = eliminated
        if scenario.target in eliminated:
            logger.warning(
                "[Graph] %s: elimination removed the target %d", scenario.id, scenario.target,
                extra={"scenario_id": scenario.id},
            )
            observations["target_eliminated"] = True
    observations["candidates_after"] = len(new.candidates)
    return new, observations


def _graph_metrics_for(trace: EpisodeTrace, success: bool) -> Dict[str, float]:
    kinds = [record.action.kind for record in trace.turns]
    wasted = sum(
        1 for record in trace.turns
        if record.action.kind in (ActionKind.EXECUTE, ActionKind.BACKTRACK) and not record.observations.get("correct")
    )
    eliminations = sum(len(record.observations.get("eliminated", [])) for record in trace.turns)
    return {
        "success": 1.0 if success else 0.0,
        "wasted": float(wasted),
        "clarifications": float(kinds.count(ActionKind.CLARIFY)),
        "backtracks": float(kinds.count(ActionKind.BACKTRACK)),
        "turns": float(sum(1 for kind in kinds if kind != ActionKind.ACCEPT)),
        "eliminations": float(eliminations),
    }


def run_graph_episode(
    method: str,
    scenario: GraphScenario,
    graph: OrgGraph,
    seed: int = 0,
    tau_suff: float = 0.4,
    theta_corr: float = 0.5,
) -> EpisodeTrace:
    """
    Run one disambiguation episode with method "dc" or "retry".

    Accept does not consume a turn. The episode ends on accept (success iff the
    last visited node is the target) or when the budget is used up.
    """
    if method not in ("dc", "retry"):
        raise PreconditionError(f"unknown graph method {method!r}")

    state = initial_state(graph, scenario)
    trace = EpisodeTrace(
        scenario_id=scenario.id,
        method_id=method,
        seed=seed,
        tags={"budget": scenario.budget, "tau_suff": tau_suff, "theta_corr": theta_corr},
    )
    success = False
    order: Optional[List[int]] = None
    if method == "retry":
        rest = sorted(state.candidates - {scenario.forced_first_visit})
        order = [int(i) for i in np.random.default_rng(seed).permutation(rest)]

    just_traversed = False
    p_corr = 1.0
    while True:
        record_no = len(trace.turns) + 1
        p_suff = compute_p_suff(state)

        if method == "dc":
            action = graph_policy(
                p_suff=p_suff,
                p_corr=p_corr,
                just_traversed=just_traversed,
                n_untried=len(state.untried),
                n_hidden=len(state.hidden),
                turn=state.turn,
                tau_suff=tau_suff,
                theta_corr=theta_corr,
            )
            signals = {"p_suff": p_suff, "p_corr": p_corr}
        else:
            last_correct = just_traversed and state.last_visited == scenario.target
            if last_correct:
                action = Action.of(ActionKind.ACCEPT)
            elif state.last_visited is None:
                action = Action.of(ActionKind.EXECUTE)
            else:
                action = Action.of(ActionKind.BACKTRACK)
            signals = {}
        flags = {"just_traversed": just_traversed}

        if action.kind == ActionKind.ACCEPT:
            success = state.last_visited == scenario.target
            accepted = Action.of(ActionKind.ACCEPT, node_id=state.last_visited)
            trace = append_turn(trace, TurnRecord(
                turn=record_no, signals=signals, flags=flags, action=accepted, valid=success,
                observations={"accepted": state.last_visited, "candidates": len(state.candidates)},
            ))
            break
        if state.turn >= state.budget:
            break

        observations: Dict[str, Any] = {"candidates_before": len(state.candidates)}
        if action.kind == ActionKind.CLARIFY:
            attribute = choose_clarify_attribute(state, graph)
            if attribute is not None:
                value = graph.node(scenario.target).attr(attribute)
                state = state.copy()
                state.known[attribute] = value
                state.hidden.remove(attribute)
                state.candidates = {i for i in state.candidates if graph.node(i).attr(attribute) == value}
                state.untried &= state.candidates
                observations.update({"attribute": attribute, "value": value})
            observations["candidates_after"] = len(state.candidates)
            action = Action.of(ActionKind.CLARIFY, attribute=attribute)
            just_traversed = False
        else:
            target_id = _next_visit(state, scenario, order)
            if target_id is None:
                logger.warning("[Graph] %s: nothing left to visit", scenario.id, extra={"scenario_id": scenario.id})
                break
            state, visit = _visit(state, target_id, scenario, graph, informed=(method == "dc"))
            observations.update(visit)
            if method == "dc":
                p_corr = visit["p_corr"]
            action = Action.of(action.kind, node_id=target_id)
            just_traversed = True

        state.turn += 1
        logger.debug(
            "[Graph] %s turn %d %s p_suff=%.3f", scenario.id, state.turn, action.id, p_suff,
            extra={"scenario_id": scenario.id, "turn": state.turn},
        )
        trace = append_turn(trace, TurnRecord(
            turn=record_no, signals=signals, flags=flags, action=action,
            valid=bool(observations.get("correct", False)), observations=observations,
        ))

    metrics = _graph_metrics_for(trace, success)
    logger.info(
        "[Graph] %s/%s seed=%d success=%s turns=%d", scenario.id, method, seed, success, int(metrics["turns"]),
        extra={"scenario_id": scenario.id, "method": method, "seed": seed},
    )
    return trace.finish(success, metrics)


def graph_metrics(traces: Sequence[EpisodeTrace]) -> Dict[str, float]:
    if not traces:
        raise PreconditionError("graph_metrics needs at least one trace")

    def mean(name: str) -> float:
        return float(np.mean([trace.metrics.get(name, 0.0) for trace in traces]))

    return {
        "success_rate": float(np.mean([1.0 if trace.success else 0.0 for trace in traces])),
        "wasted_traversals": mean("wasted"),
        "clarify_count": mean("clarifications"),
        "backtrack_count": mean("backtracks"),
        "avg_turns": mean("turns"),
    }
